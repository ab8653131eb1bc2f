//! Soft-margin support vector classifier solved in the dual by sequential
//! two-coefficient updates.
//!
//! Each step moves the maximal violating pair along the equality constraint
//! `Σ α_i y_i = 0` by the exact one-dimensional optimum, clipped to the box
//! `[0, C]`. Training stops once the KKT gap is at most `tol`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
        }
        Ok(self.eval_unchecked(a, b))
    }

    fn eval_unchecked(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        match self {
            Kernel::Linear => a.dot(&b),
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

/// `1 / (d · Var(X))` over all entries of the training matrix.
pub fn default_gamma(x: ArrayView2<f64>) -> f64 {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (x.ncols() as f64 * var)
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    /// `"linear"` or `"rbf"`.
    pub kernel: String,
    /// RBF width; `None` uses [`default_gamma`].
    pub gamma: Option<f64>,
    pub c: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { kernel: "rbf".into(), gamma: None, c: 1.0, tol: 1e-3, max_iter: 1_000_000 }
    }
}

impl SvmConfig {
    pub fn resolve_kernel(&self, x: ArrayView2<f64>) -> Result<Kernel> {
        match self.kernel.as_str() {
            "linear" => Ok(Kernel::Linear),
            "rbf" => Ok(Kernel::Rbf { gamma: self.gamma.unwrap_or_else(|| default_gamma(x)) }),
            other => Err(Error::InvalidConfig(format!("unknown kernel {other}"))),
        }
    }
}

/// Full dual solution over the training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

pub fn solve_dual(x: ArrayView2<f64>, y: &[u8], kernel: Kernel, c: f64, tol: f64, max_iter: usize) -> Result<DualSolution> {
    let n = x.nrows();
    if n != y.len() {
        return Err(Error::LengthMismatch { left: n, right: y.len() });
    }
    if !y.contains(&0) || !y.contains(&1) {
        return Err(Error::DegenerateClass("SVM needs both classes".into()));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidConfig("C must be > 0".into()));
    }
    let ys: Vec<f64> = y.iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }).collect();
    let k = Array2::from_shape_fn((n, n), |(i, j)| kernel.eval_unchecked(x.row(i), x.row(j)));
    let mut alpha = vec![0.0; n];
    // f_no_bias(x_i) - y_i; the KKT score of row i is -err[i].
    let mut err: Vec<f64> = ys.iter().map(|y| -y).collect();

    let in_up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let in_low = |a: f64, y: f64| (y < 0.0 && a < c) || (y > 0.0 && a > 0.0);

    let mut iterations = 0;
    loop {
        let (mut i, mut m) = (usize::MAX, f64::NEG_INFINITY);
        let (mut j, mut big_m) = (usize::MAX, f64::INFINITY);
        for t in 0..n {
            let score = -err[t];
            if in_up(alpha[t], ys[t]) && score > m {
                (i, m) = (t, score);
            }
            if in_low(alpha[t], ys[t]) && score < big_m {
                (j, big_m) = (t, score);
            }
        }
        if i == usize::MAX || j == usize::MAX || m - big_m <= tol {
            let free: Vec<f64> = (0..n).filter(|&t| alpha[t] > 0.0 && alpha[t] < c).map(|t| -err[t]).collect();
            let bias = if free.is_empty() {
                match (m.is_finite(), big_m.is_finite()) {
                    (true, true) => (m + big_m) / 2.0,
                    (true, false) => m,
                    (false, true) => big_m,
                    (false, false) => 0.0,
                }
            } else {
                free.iter().sum::<f64>() / free.len() as f64
            };
            return Ok(DualSolution { alpha, bias, iterations });
        }
        if iterations >= max_iter {
            return Err(Error::NoConvergence(iterations));
        }
        iterations += 1;

        let curvature = (k[[i, i]] + k[[j, j]] - 2.0 * k[[i, j]]).max(1e-12);
        let mut step = (m - big_m) / curvature;
        step = step.min(if ys[i] > 0.0 { c - alpha[i] } else { alpha[i] });
        step = step.min(if ys[j] > 0.0 { alpha[j] } else { c - alpha[j] });

        alpha[i] += ys[i] * step;
        alpha[j] -= ys[j] * step;
        for t in [i, j] {
            let a = &mut alpha[t];
            if *a < 1e-14 * c {
                *a = 0.0;
            } else if *a > c * (1.0 - 1e-14) {
                *a = c;
            }
        }
        for t in 0..n {
            err[t] += step * (k[[t, i]] - k[[t, j]]);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub support_vectors: Array2<f64>,
    /// `α_i y_i` per retained support vector.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub kernel: Kernel,
    pub c: f64,
}

pub fn fit_svm(x: ArrayView2<f64>, y: &[u8], config: &SvmConfig) -> Result<SvmModel> {
    let kernel = config.resolve_kernel(x)?;
    let sol = solve_dual(x, y, kernel, config.c, config.tol, config.max_iter)?;
    Ok(SvmModel::from_solution(x, y, &sol, kernel, config.c))
}

impl SvmModel {
    pub fn from_solution(x: ArrayView2<f64>, y: &[u8], sol: &DualSolution, kernel: Kernel, c: f64) -> Self {
        let keep: Vec<usize> = (0..x.nrows()).filter(|&i| sol.alpha[i] > 0.0).collect();
        SvmModel {
            support_vectors: x.select(ndarray::Axis(0), &keep),
            dual_coefs: keep.iter().map(|&i| sol.alpha[i] * if y[i] == 1 { 1.0 } else { -1.0 }).collect(),
            bias: sol.bias,
            kernel,
            c,
        }
    }

    pub fn decision(&self, row: ArrayView1<f64>) -> Result<f64> {
        if row.len() != self.support_vectors.ncols() {
            return Err(Error::DimensionMismatch { expected: self.support_vectors.ncols(), got: row.len() });
        }
        Ok(self.bias
            + self
                .support_vectors
                .rows()
                .into_iter()
                .zip(&self.dual_coefs)
                .map(|(sv, coef)| coef * self.kernel.eval_unchecked(sv, row))
                .sum::<f64>())
    }

    /// Class 1 iff the decision value is `>= 0`.
    pub fn predict(&self, row: ArrayView1<f64>) -> Result<u8> {
        Ok((self.decision(row)? >= 0.0) as u8)
    }

    /// Uncalibrated posterior `σ(decision)`; agrees in sign with the decision.
    pub fn predict_proba(&self, row: ArrayView1<f64>) -> Result<f64> {
        Ok(sigmoid(self.decision(row)?))
    }
}
