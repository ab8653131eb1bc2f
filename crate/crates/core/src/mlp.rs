//! One-hidden-layer perceptron: rectifier hidden units, sigmoid output,
//! class-weighted cross-entropy with an L2 penalty, trained by mini-batch
//! SGD with momentum and validation early stopping.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{balanced_accuracy, confusion, report, stratified_holdout, stratified_kfold};
use crate::linear::{class_weights, sigmoid, softplus};

pub const DEFAULT_WIDTHS: [usize; 7] = [25, 50, 100, 200, 300, 400, 480];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    /// `width × d`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
    pub lambda: f64,
    /// Loss multipliers for classes 0 and 1.
    pub class_weights: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGradient {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl MlpModel {
    pub fn zeros(width: usize, d: usize) -> Self {
        MlpModel {
            w1: Array2::zeros((width, d)),
            b1: Array1::zeros(width),
            w2: Array1::zeros(width),
            b2: 0.0,
            lambda: 0.0,
            class_weights: [1.0, 1.0],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(width: usize, d: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(width, d);
        let a1 = (6.0 / (d + width) as f64).sqrt();
        m.w1.mapv_inplace(|_| rng.random_range(-a1..=a1));
        let a2 = (6.0 / (width + 1) as f64).sqrt();
        m.w2.mapv_inplace(|_| rng.random_range(-a2..=a2));
        m
    }

    pub fn width(&self) -> usize {
        self.w2.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.w1.ncols()
    }

    pub fn forward(&self, row: ArrayView1<f64>) -> Result<f64> {
        if row.len() != self.n_inputs() {
            return Err(Error::DimensionMismatch { expected: self.n_inputs(), got: row.len() });
        }
        let h = (self.w1.dot(&row) + &self.b1).mapv(|v| v.max(0.0));
        Ok(sigmoid(h.dot(&self.w2) + self.b2))
    }

    fn logits(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        let mut h = x.dot(&self.w1.t());
        h += &self.b1;
        h.mapv_inplace(|v| v.max(0.0));
        let z = h.dot(&self.w2) + self.b2;
        (h, z)
    }

    fn penalty(&self) -> f64 {
        self.lambda * (self.w1.iter().map(|v| v * v).sum::<f64>() + self.w2.dot(&self.w2))
    }

    /// Class-weighted mean cross-entropy over the rows, without the penalty.
    pub fn data_loss(&self, x: ArrayView2<f64>, y: &[u8]) -> f64 {
        let (_, z) = self.logits(x);
        z.iter().zip(y).map(|(&zi, &yi)| self.class_weights[yi as usize] * (softplus(zi) - yi as f64 * zi)).sum::<f64>()
            / y.len() as f64
    }

    /// Full training objective: data loss plus `λ Σ ‖W‖²` over both weight
    /// layers; biases are not penalized.
    pub fn loss(&self, x: ArrayView2<f64>, y: &[u8]) -> f64 {
        self.data_loss(x, y) + self.penalty()
    }

    pub fn loss_and_gradient(&self, x: ArrayView2<f64>, y: &[u8]) -> (f64, MlpGradient) {
        let n = y.len() as f64;
        let (h, z) = self.logits(x);
        let mut loss = 0.0;
        let mut dz = Array1::zeros(y.len());
        for (i, (&zi, &yi)) in z.iter().zip(y).enumerate() {
            let c = self.class_weights[yi as usize];
            loss += c * (softplus(zi) - yi as f64 * zi);
            dz[i] = c * (sigmoid(zi) - yi as f64) / n;
        }
        let gw2 = h.t().dot(&dz) + &self.w2 * (2.0 * self.lambda);
        let gb2 = dz.sum();
        let mut dh = dz.insert_axis(Axis(1)).dot(&self.w2.view().insert_axis(Axis(0)));
        dh.zip_mut_with(&h, |g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        let gw1 = dh.t().dot(&x) + &self.w1 * (2.0 * self.lambda);
        let gb1 = dh.sum_axis(Axis(0));
        (loss / n + self.penalty(), MlpGradient { w1: gw1, b1: gb1, w2: gw2, b2: gb2 })
    }

    /// Parameters in the order `w1` (row-major), `b1`, `w2`, `b2`.
    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.w1.iter().copied().collect();
        p.extend(self.b1.iter());
        p.extend(self.w2.iter());
        p.push(self.b2);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, rest) = rest.split_at(self.w2.len());
        self.w1.iter_mut().zip(a).for_each(|(t, &s)| *t = s);
        self.b1.iter_mut().zip(b).for_each(|(t, &s)| *t = s);
        self.w2.iter_mut().zip(c).for_each(|(t, &s)| *t = s);
        self.b2 = rest[0];
    }
}

impl MlpGradient {
    pub fn flatten(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.w1.iter().copied().collect();
        p.extend(self.b1.iter());
        p.extend(self.w2.iter());
        p.push(self.b2);
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub width: usize,
    pub lambda: f64,
    pub class_weight: bool,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Stratified fraction of the training rows held out for early stopping;
    /// 0 disables early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            width: 400,
            lambda: 1e-4,
            class_weight: true,
            batch_size: 32,
            learning_rate: 1e-3,
            momentum: 0.9,
            patience: 20,
            max_epochs: 2000,
            validation_fraction: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    pub valid_balanced_accuracy: Vec<f64>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_loss,valid_balanced_accuracy\n");
        for e in 0..self.stopped_epoch {
            let v = |s: &[f64]| s.get(e).map(|x| x.to_string()).unwrap_or_default();
            out += &format!("{},{},{},{}\n", e + 1, self.train_loss[e], v(&self.valid_loss), v(&self.valid_balanced_accuracy));
        }
        out
    }
}

pub fn fit_mlp(x: ArrayView2<f64>, y: &[u8], config: &MlpConfig) -> Result<(MlpModel, TrainTrace)> {
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch { left: x.nrows(), right: y.len() });
    }
    if config.width == 0 || config.batch_size == 0 || !(config.lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("invalid perceptron settings {config:?}")));
    }
    let ones = y.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == y.len() {
        return Err(Error::DegenerateClass("perceptron needs both classes".into()));
    }
    let (train_rows, valid_rows): (Vec<usize>, Vec<usize>) = if config.validation_fraction > 0.0 {
        let held = stratified_holdout(y, config.validation_fraction, config.seed)?;
        (0..y.len()).partition(|&i| !held[i])
    } else {
        ((0..y.len()).collect(), Vec::new())
    };
    let tx = x.select(Axis(0), &train_rows);
    let ty: Vec<u8> = train_rows.iter().map(|&i| y[i]).collect();
    let vx = x.select(Axis(0), &valid_rows);
    let vy: Vec<u8> = valid_rows.iter().map(|&i| y[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = MlpModel::init(config.width, x.ncols(), &mut rng);
    model.lambda = config.lambda;
    if config.class_weight {
        let w = class_weights(&ty, true);
        let pick = |c: u8| ty.iter().position(|&v| v == c).map(|i| w[i]).unwrap_or(1.0);
        model.class_weights = [pick(0), pick(1)];
    }

    let mut velocity = vec![0.0; model.params().len()];
    let mut order: Vec<usize> = (0..ty.len()).collect();
    let mut trace = TrainTrace {
        train_loss: Vec::new(),
        valid_loss: Vec::new(),
        valid_balanced_accuracy: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best = (f64::INFINITY, model.clone());
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let bx = tx.select(Axis(0), batch);
            let by: Vec<u8> = batch.iter().map(|&i| ty[i]).collect();
            let (_, g) = model.loss_and_gradient(bx.view(), &by);
            let mut p = model.params();
            for ((v, pi), gi) in velocity.iter_mut().zip(p.iter_mut()).zip(g.flatten()) {
                *v = config.momentum * *v - config.learning_rate * gi;
                *pi += *v;
            }
            model.set_params(&p);
        }
        let loss = model.loss(tx.view(), &ty);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("perceptron loss diverged at epoch {epoch}")));
        }
        trace.train_loss.push(loss);
        trace.stopped_epoch = epoch;
        if valid_rows.is_empty() {
            continue;
        }
        let vloss = model.data_loss(vx.view(), &vy);
        let pred: Vec<u8> = vx.rows().into_iter().map(|r| (model.forward(r).unwrap_or(0.5) >= 0.5) as u8).collect();
        trace.valid_loss.push(vloss);
        trace.valid_balanced_accuracy.push(balanced_accuracy(&vy, &pred)?);
        if vloss < best.0 {
            best = (vloss, model.clone());
            trace.best_epoch = epoch;
        } else if epoch - trace.best_epoch >= config.patience {
            trace.stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    if valid_rows.is_empty() {
        trace.best_epoch = trace.stopped_epoch;
        return Ok((model, trace));
    }
    Ok((best.1, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthScore {
    pub width: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub class0_f1: f64,
    pub class1_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub scores: Vec<WidthScore>,
    pub chosen_width: usize,
}

/// Cross-validates each hidden width on pooled out-of-fold predictions and
/// picks the best class-0 F1, preferring the smaller width on ties.
pub fn width_sweep(x: ArrayView2<f64>, y: &[u8], widths: &[usize], folds: usize, base: &MlpConfig) -> Result<SweepResult> {
    if widths.is_empty() {
        return Err(Error::InvalidConfig("width grid is empty".into()));
    }
    let fold = stratified_kfold(y, folds, base.seed)?;
    let jobs: Vec<(usize, usize)> = widths.iter().flat_map(|&w| (0..folds).map(move |f| (w, f))).collect();
    let preds: Vec<Vec<(usize, u8)>> = jobs
        .par_iter()
        .map(|&(width, f)| {
            let (tr, te): (Vec<usize>, Vec<usize>) = (0..y.len()).partition(|&i| fold[i] != f);
            let tx = x.select(Axis(0), &tr);
            let ty: Vec<u8> = tr.iter().map(|&i| y[i]).collect();
            let (m, _) = fit_mlp(tx.view(), &ty, &MlpConfig { width, ..base.clone() })?;
            te.iter().map(|&i| Ok((i, (m.forward(x.row(i))? >= 0.5) as u8))).collect()
        })
        .collect::<Result<_>>()?;
    let mut scores = Vec::new();
    for (wi, &width) in widths.iter().enumerate() {
        let mut pred = vec![0u8; y.len()];
        for p in &preds[wi * folds..(wi + 1) * folds] {
            for &(i, v) in p {
                pred[i] = v;
            }
        }
        let r = report(&confusion(y, &pred)?);
        scores.push(WidthScore {
            width,
            accuracy: r.accuracy,
            weighted_f1: r.weighted_f1,
            class0_f1: r.per_class[0].f1,
            class1_f1: r.per_class[1].f1,
        });
    }
    let chosen = scores
        .iter()
        .fold(None::<&WidthScore>, |best, s| match best {
            Some(b) if b.class0_f1 > s.class0_f1 || (b.class0_f1 == s.class0_f1 && b.width <= s.width) => Some(b),
            _ => Some(s),
        })
        .expect("nonempty grid");
    Ok(SweepResult { chosen_width: chosen.width, scores })
}
