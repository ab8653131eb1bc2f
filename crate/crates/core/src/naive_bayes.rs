//! Naive Bayes with Gaussian conditionals for continuous features and
//! Laplace-smoothed frequency tables for coded ones.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-9;
pub const LAPLACE_ALPHA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Conditional {
    Gaussian { mean: [f64; 2], var: [f64; 2] },
    /// `probs[class][code]`; each row sums to 1. `unseen[class]` is the
    /// smoothed mass used for codes outside the fitted table.
    Categorical { probs: [Vec<f64>; 2], unseen: [f64; 2] },
}

impl Conditional {
    fn log_likelihood(&self, class: usize, x: f64) -> f64 {
        match self {
            Conditional::Gaussian { mean, var } => {
                let v = var[class];
                -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - mean[class]).powi(2) / v)
            }
            Conditional::Categorical { probs, unseen } => {
                let table = &probs[class];
                let p = if x >= 0.0 && (x as usize) < table.len() && x.fract() == 0.0 {
                    table[x as usize]
                } else {
                    unseen[class]
                };
                p.ln()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayesModel {
    pub priors: [f64; 2],
    pub conditionals: Vec<Conditional>,
}

pub fn fit_naive_bayes(x: ArrayView2<f64>, y: &[u8], categorical: &[bool]) -> Result<NaiveBayesModel> {
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch { left: x.nrows(), right: y.len() });
    }
    if categorical.len() != x.ncols() {
        return Err(Error::DimensionMismatch { expected: x.ncols(), got: categorical.len() });
    }
    let rows: [Vec<usize>; 2] = [0u8, 1].map(|c| (0..y.len()).filter(|&i| y[i] == c).collect());
    if rows.iter().any(|r| r.len() < 2) {
        return Err(Error::DegenerateClass("naive Bayes needs at least two rows per class".into()));
    }
    let n = y.len() as f64;
    let priors = [rows[0].len() as f64 / n, rows[1].len() as f64 / n];
    let conditionals = (0..x.ncols())
        .map(|j| {
            let col = x.column(j);
            if categorical[j] {
                let k = col.iter().fold(0.0f64, |m, &v| m.max(v)) as usize + 1;
                let tables = [0, 1].map(|c| {
                    let mut counts = vec![0.0; k];
                    for &i in &rows[c] {
                        counts[col[i] as usize] += 1.0;
                    }
                    let denom = rows[c].len() as f64 + LAPLACE_ALPHA * k as f64;
                    let probs: Vec<f64> = counts.iter().map(|&cnt| (cnt + LAPLACE_ALPHA) / denom).collect();
                    (probs, LAPLACE_ALPHA / denom)
                });
                let [(p0, u0), (p1, u1)] = tables;
                Conditional::Categorical { probs: [p0, p1], unseen: [u0, u1] }
            } else {
                let stats = [0, 1].map(|c| {
                    let m = rows[c].iter().map(|&i| col[i]).sum::<f64>() / rows[c].len() as f64;
                    let v = rows[c].iter().map(|&i| (col[i] - m).powi(2)).sum::<f64>() / rows[c].len() as f64;
                    (m, v.max(VARIANCE_FLOOR))
                });
                Conditional::Gaussian { mean: [stats[0].0, stats[1].0], var: [stats[0].1, stats[1].1] }
            }
        })
        .collect();
    Ok(NaiveBayesModel { priors, conditionals })
}

impl NaiveBayesModel {
    /// Posterior `[p(y=0|x), p(y=1|x)]`, accumulated in log space.
    pub fn posterior(&self, row: ArrayView1<f64>) -> Result<[f64; 2]> {
        if row.len() != self.conditionals.len() {
            return Err(Error::DimensionMismatch { expected: self.conditionals.len(), got: row.len() });
        }
        let log = [0, 1].map(|c| {
            self.priors[c].ln() + self.conditionals.iter().zip(row.iter()).map(|(cond, &x)| cond.log_likelihood(c, x)).sum::<f64>()
        });
        let m = log[0].max(log[1]);
        let e = [(log[0] - m).exp(), (log[1] - m).exp()];
        let s = e[0] + e[1];
        Ok([e[0] / s, e[1] / s])
    }

    pub fn predict_proba(&self, row: ArrayView1<f64>) -> Result<f64> {
        Ok(self.posterior(row)?[1])
    }
}
