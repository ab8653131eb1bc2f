//! Second-order gradient boosting of regression trees under logistic loss.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{sigmoid, softplus};
use crate::tree::{fit_boost_tree, Node, TreeConfig};

/// Rounds without validation improvement before stopping.
pub const EARLY_STOP_ROUNDS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostConfig {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub colsample_bytree: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for BoostConfig {
    /// Tuned values reported for the surgical cohort; `λ = 1` and `γ = 0`
    /// are the library defaults.
    fn default() -> Self {
        BoostConfig {
            n_estimators: 200,
            max_depth: 3,
            learning_rate: 0.05,
            subsample: 0.8,
            colsample_bytree: 1.0,
            lambda: 1.0,
            gamma: 0.0,
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.gamma >= 0.0
            && self.subsample > 0.0
            && self.subsample <= 1.0
            && self.colsample_bytree > 0.0
            && self.colsample_bytree <= 1.0
            && self.learning_rate > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid boosting hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostModel {
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Node>,
    pub config: BoostConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoostTrace {
    /// Mean training logistic loss after each round, starting with the base.
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    pub stop_reason: String,
}

fn logistic_loss(scores: &[f64], y: &[u8]) -> f64 {
    scores.iter().zip(y).map(|(&s, &yi)| softplus(s) - yi as f64 * s).sum::<f64>() / y.len() as f64
}

pub fn fit_boost(x: ArrayView2<f64>, y: &[u8], config: &BoostConfig) -> Result<BoostModel> {
    fit_boost_traced(x, y, None, config).map(|(m, _)| m)
}

/// Fits the ensemble; with a validation set, stops after
/// [`EARLY_STOP_ROUNDS`] rounds without improvement and keeps the best
/// prefix.
pub fn fit_boost_traced(
    x: ArrayView2<f64>,
    y: &[u8],
    valid: Option<(ArrayView2<f64>, &[u8])>,
    config: &BoostConfig,
) -> Result<(BoostModel, BoostTrace)> {
    config.validate()?;
    let n = y.len();
    if x.nrows() != n || n == 0 {
        return Err(Error::LengthMismatch { left: x.nrows(), right: n });
    }
    let prevalence = y.iter().filter(|&&v| v == 1).count() as f64 / n as f64;
    let prevalence = prevalence.clamp(1e-6, 1.0 - 1e-6);
    let base_score = (prevalence / (1.0 - prevalence)).ln();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scores = vec![base_score; n];
    let mut valid_scores = valid.map(|(vx, _)| vec![base_score; vx.nrows()]);
    let mut trees = Vec::new();
    let mut trace = BoostTrace { train_loss: vec![logistic_loss(&scores, y)], ..Default::default() };
    let (mut best_valid, mut best_len) = (f64::INFINITY, 0);
    if let (Some((_, vy)), Some(vs)) = (valid, &valid_scores) {
        best_valid = logistic_loss(vs, vy);
        trace.valid_loss.push(best_valid);
    }
    let d = x.ncols();
    let n_rows = ((config.subsample * n as f64).round() as usize).clamp(1, n);
    let n_cols = ((config.colsample_bytree * d as f64).round() as usize).clamp(1, d);
    trace.stop_reason = "max_rounds".into();

    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for _ in 0..config.n_estimators {
        for i in 0..n {
            let p = sigmoid(scores[i]);
            grad[i] = p - y[i] as f64;
            hess[i] = p * (1.0 - p);
        }
        let mut rows: Vec<usize> = if n_rows < n { sample(&mut rng, n, n_rows).into_vec() } else { (0..n).collect() };
        rows.sort_unstable();
        let mut cols: Vec<usize> = if n_cols < d { sample(&mut rng, d, n_cols).into_vec() } else { (0..d).collect() };
        cols.sort_unstable();

        let tree_cfg = TreeConfig { max_depth: Some(config.max_depth), min_leaf: 1, max_features: None };
        let sub = x.select(ndarray::Axis(1), &cols);
        let mut tree = fit_boost_tree(sub.view(), &grad, &hess, &rows, config.lambda, config.gamma, &tree_cfg, &mut rng);
        if matches!(tree, Node::Leaf { .. }) {
            trace.stop_reason = "no_positive_gain".into();
            break;
        }
        remap_features(&mut tree, &cols);
        for (i, s) in scores.iter_mut().enumerate() {
            *s += config.learning_rate * tree.eval(x.row(i));
            if !s.is_finite() {
                return Err(Error::NonFinite("boosting score overflow".into()));
            }
        }
        trees.push(tree);
        trace.train_loss.push(logistic_loss(&scores, y));

        if let (Some((vx, vy)), Some(vs)) = (valid, valid_scores.as_mut()) {
            let tree = trees.last().expect("just pushed");
            for (i, s) in vs.iter_mut().enumerate() {
                *s += config.learning_rate * tree.eval(vx.row(i));
            }
            let loss = logistic_loss(vs, vy);
            trace.valid_loss.push(loss);
            if loss < best_valid {
                (best_valid, best_len) = (loss, trees.len());
            } else if trees.len() - best_len >= EARLY_STOP_ROUNDS {
                trees.truncate(best_len);
                trace.stop_reason = "early_stop".into();
                break;
            }
        }
    }
    Ok((BoostModel { base_score, learning_rate: config.learning_rate, trees, config: config.clone() }, trace))
}

fn remap_features(node: &mut Node, cols: &[usize]) {
    if let Node::Split { feature, left, right, .. } = node {
        *feature = cols[*feature];
        remap_features(left, cols);
        remap_features(right, cols);
    }
}

impl BoostModel {
    pub fn raw_score(&self, row: ArrayView1<f64>) -> f64 {
        self.base_score + self.learning_rate * self.trees.iter().map(|t| t.eval(row)).sum::<f64>()
    }

    pub fn predict_proba(&self, row: ArrayView1<f64>) -> f64 {
        sigmoid(self.raw_score(row))
    }
}
