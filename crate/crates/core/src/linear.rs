//! Regularized logistic regression trained by full-batch gradient descent.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    L1,
    #[default]
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub penalty: Penalty,
    pub lambda: f64,
    /// Fixed step size. `None` uses the inverse Lipschitz constant of the loss,
    /// which makes plain gradient descent monotone.
    pub learning_rate: Option<f64>,
    pub momentum: f64,
    pub max_epochs: usize,
    pub tol: f64,
    /// Inverse-prevalence sample weights.
    pub class_weight: bool,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            penalty: Penalty::L2,
            lambda: 1.0,
            learning_rate: None,
            momentum: 0.0,
            max_epochs: 5000,
            tol: 1e-9,
            class_weight: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub penalty: Penalty,
    pub lambda: f64,
}

impl LogisticModel {
    pub fn zeros(d: usize) -> Self {
        LogisticModel { weights: vec![0.0; d], bias: 0.0, penalty: Penalty::L2, lambda: 0.0 }
    }

    pub fn logit(&self, row: ArrayView1<f64>) -> f64 {
        self.bias + self.weights.iter().zip(row.iter()).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn predict_proba(&self, row: ArrayView1<f64>) -> Result<f64> {
        if row.len() != self.weights.len() {
            return Err(Error::DimensionMismatch { expected: self.weights.len(), got: row.len() });
        }
        Ok(sigmoid(self.logit(row)))
    }
}

/// Per-row weights; inverse prevalence gives each class half the total mass.
pub fn class_weights(y: &[u8], balanced: bool) -> Vec<f64> {
    if !balanced {
        return vec![1.0; y.len()];
    }
    let n = y.len() as f64;
    let ones = y.iter().filter(|&&v| v == 1).count() as f64;
    let w = [n / (2.0 * (n - ones)), n / (2.0 * ones)];
    y.iter().map(|&v| w[v as usize]).collect()
}

/// Weighted negative log-likelihood plus `lambda * R(w)`, with
/// `R = ||w||^2 / 2` (L2) or `||w||_1` (L1). The bias is not penalized.
pub fn objective(model: &LogisticModel, x: ArrayView2<f64>, y: &[u8], sample_weight: &[f64]) -> f64 {
    let nll: f64 = x
        .rows()
        .into_iter()
        .zip(y.iter().zip(sample_weight))
        .map(|(row, (&yi, &wi))| {
            let z = model.logit(row);
            // -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y z
            wi * (softplus(z) - yi as f64 * z)
        })
        .sum();
    nll + model.lambda * penalty_value(model)
}

fn penalty_value(model: &LogisticModel) -> f64 {
    match model.penalty {
        Penalty::L2 => 0.5 * model.weights.iter().map(|w| w * w).sum::<f64>(),
        Penalty::L1 => model.weights.iter().map(|w| w.abs()).sum(),
    }
}

/// Gradient of the smooth part of [`objective`] with respect to
/// `(weights, bias)`: `Σ w_i (σ(z_i) - y_i) x_i`, plus `λ w` under L2.
/// Under L1 the subgradient `λ sign(w)` is added.
pub fn gradient(model: &LogisticModel, x: ArrayView2<f64>, y: &[u8], sample_weight: &[f64]) -> (Array1<f64>, f64) {
    let mut gw = Array1::zeros(model.weights.len());
    let mut gb = 0.0;
    for (row, (&yi, &wi)) in x.rows().into_iter().zip(y.iter().zip(sample_weight)) {
        let r = wi * (sigmoid(model.logit(row)) - yi as f64);
        gw.scaled_add(r, &row);
        gb += r;
    }
    for (g, w) in gw.iter_mut().zip(&model.weights) {
        *g += model.lambda
            * match model.penalty {
                Penalty::L2 => *w,
                Penalty::L1 => w.signum() * (*w != 0.0) as u8 as f64,
            };
    }
    (gw, gb)
}

/// Largest eigenvalue of `[X 1]ᵀ diag(w) [X 1]` by power iteration.
fn gram_spectral_norm(x: ArrayView2<f64>, sample_weight: &[f64]) -> f64 {
    let d = x.ncols() + 1;
    let mut v = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut next = Array1::<f64>::zeros(d);
        for (row, &wi) in x.rows().into_iter().zip(sample_weight) {
            let dot = row.dot(&v.slice(ndarray::s![..d - 1])) + v[d - 1];
            next.slice_mut(ndarray::s![..d - 1]).scaled_add(wi * dot, &row);
            next[d - 1] += wi * dot;
        }
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let converged = (norm - lambda).abs() <= 1e-10 * norm;
        lambda = norm;
        v = next / norm;
        if converged {
            break;
        }
    }
    lambda
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub objective: Vec<f64>,
    pub converged: bool,
}

pub fn fit_logistic(x: ArrayView2<f64>, y: &[u8], config: &LogisticConfig) -> Result<(LogisticModel, LossTrace)> {
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch { left: x.nrows(), right: y.len() });
    }
    let ones = y.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == y.len() {
        return Err(Error::DegenerateClass("logistic regression needs both classes".into()));
    }
    if !(config.lambda >= 0.0) {
        return Err(Error::InvalidConfig("lambda must be >= 0".into()));
    }
    let sw = class_weights(y, config.class_weight);
    let step = match config.learning_rate {
        Some(lr) => lr,
        None => {
            let l2 = if config.penalty == Penalty::L2 { config.lambda } else { 0.0 };
            1.0 / (0.25 * gram_spectral_norm(x, &sw) * 1.01 + l2)
        }
    };
    let mut model = LogisticModel { weights: vec![0.0; x.ncols()], bias: 0.0, penalty: config.penalty, lambda: config.lambda };
    let mut vel_w = Array1::<f64>::zeros(x.ncols());
    let mut vel_b = 0.0;
    let mut trace = LossTrace { objective: vec![objective(&model, x, y, &sw)], converged: false };
    for _ in 0..config.max_epochs {
        let mut smooth = model.clone();
        if config.penalty == Penalty::L1 {
            smooth.lambda = 0.0;
        }
        let (gw, gb) = gradient(&smooth, x, y, &sw);
        vel_w = vel_w * config.momentum - gw * step;
        vel_b = vel_b * config.momentum - gb * step;
        for (w, v) in model.weights.iter_mut().zip(vel_w.iter()) {
            *w += v;
            if config.penalty == Penalty::L1 {
                let t = step * config.lambda;
                *w = w.signum() * (w.abs() - t).max(0.0);
            }
        }
        model.bias += vel_b;
        let obj = objective(&model, x, y, &sw);
        if !obj.is_finite() {
            return Err(Error::NonFinite(format!("logistic objective diverged with step {step}")));
        }
        let prev = *trace.objective.last().expect("nonempty");
        trace.objective.push(obj);
        if (prev - obj).abs() <= config.tol * prev.abs().max(1.0) {
            trace.converged = true;
            break;
        }
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        for z in [-40.0, -3.3, -0.1, 0.7, 12.0, 800.0] {
            assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() < 1e-15);
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn predict_examples() {
        let m = LogisticModel::zeros(2);
        assert_eq!(m.predict_proba(array![3.0, -9.0].view()).unwrap(), 0.5);
        let m = LogisticModel { weights: vec![3f64.ln(), 0.0], ..LogisticModel::zeros(2) };
        assert!((m.predict_proba(array![1.0, 5.0].view()).unwrap() - 0.75).abs() < 1e-12);
        assert!(matches!(m.predict_proba(array![1.0].view()), Err(Error::DimensionMismatch { .. })));
        let lo = m.predict_proba(array![0.2, 0.0].view()).unwrap();
        let hi = m.predict_proba(array![0.3, 0.0].view()).unwrap();
        assert!(hi > lo);
    }

    #[test]
    fn symmetric_separable_pair() {
        let x = array![[-1.0], [1.0]];
        let cfg = LogisticConfig { lambda: 0.1, ..Default::default() };
        let (m, trace) = fit_logistic(x.view(), &[0, 1], &cfg).unwrap();
        assert!(m.weights[0] > 0.0);
        assert!(m.bias.abs() < 1e-6);
        assert!(trace.converged);
    }

    #[test]
    fn huge_penalty_predicts_prevalence() {
        let x = array![[-1.0], [0.5], [1.0], [2.0]];
        let cfg = LogisticConfig { lambda: 1e3, max_epochs: 200_000, tol: 1e-15, ..Default::default() };
        let (m, _) = fit_logistic(x.view(), &[0, 1, 1, 1], &cfg).unwrap();
        // Optimum is w ~ -grad/lambda = 1.625e-3 at the prevalence intercept.
        assert!(m.weights[0].abs() < 2e-3);
        assert!((m.predict_proba(array![0.0].view()).unwrap() - 0.75).abs() < 1e-3);
    }

    #[test]
    fn objective_is_monotone_under_plain_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((40, 3), |_| rng.random_range(-2.0..2.0));
        let y: Vec<u8> = x.rows().into_iter().map(|r| (r[0] - 0.5 * r[1] + rng.random_range(-1.0..1.0) > 0.0) as u8).collect();
        for penalty in [Penalty::L1, Penalty::L2] {
            let cfg = LogisticConfig { penalty, lambda: 0.5, ..Default::default() };
            let (_, trace) = fit_logistic(x.view(), &y, &cfg).unwrap();
            for w in trace.objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{penalty:?}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn l1_zeroes_irrelevant_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((80, 4), |_| rng.random_range(-1.0..1.0));
        let y: Vec<u8> = x.rows().into_iter().map(|r| (r[0] > 0.0) as u8).collect();
        let cfg = LogisticConfig { penalty: Penalty::L1, lambda: 8.0, ..Default::default() };
        let (m, _) = fit_logistic(x.view(), &y, &cfg).unwrap();
        assert!(m.weights[0] > 0.5);
        assert_eq!(m.weights[1..].iter().filter(|w| **w == 0.0).count(), 3);
    }

    #[test]
    fn diverging_step_is_non_finite() {
        let x = array![[-100.0], [100.0], [50.0]];
        let cfg = LogisticConfig { learning_rate: Some(1e300), lambda: 1.0, ..Default::default() };
        assert!(matches!(fit_logistic(x.view(), &[0, 1, 0], &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn balanced_weights() {
        let w = class_weights(&[0, 1, 1, 1], true);
        assert_eq!(w, vec![2.0, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
    }
}
