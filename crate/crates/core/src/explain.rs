//! Permutation importance, Shapley attributions, and PCA.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::balanced_accuracy;
use crate::model::Classifier;

pub const DEFAULT_REPEATS: usize = 30;
pub const DEFAULT_BACKGROUND: usize = 100;
/// Largest dimension explained by full coalition enumeration.
pub const EXACT_MAX_FEATURES: usize = 12;

fn mix(seed: u64, salt: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)).random()
}

fn predict_all(model: &dyn Classifier, x: ArrayView2<f64>) -> Result<Vec<u8>> {
    x.rows().into_iter().map(|r| model.predict(r)).collect()
}

/// Mean and population standard deviation of the balanced-accuracy drop when
/// column `feature` is shuffled, over `repeats` permutations.
pub fn permutation_importance(
    model: &dyn Classifier,
    x: ArrayView2<f64>,
    y: &[u8],
    feature: usize,
    repeats: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if feature >= x.ncols() {
        return Err(Error::UnknownFeature(format!("column {feature}")));
    }
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be >= 1".into()));
    }
    let base = balanced_accuracy(y, &predict_all(model, x)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, feature as u64));
    let mut drops = Vec::with_capacity(repeats);
    let mut shuffled = x.to_owned();
    let original: Vec<f64> = x.column(feature).to_vec();
    for _ in 0..repeats {
        let mut col = original.clone();
        col.shuffle(&mut rng);
        shuffled.column_mut(feature).assign(&Array1::from(col));
        drops.push(base - balanced_accuracy(y, &predict_all(model, shuffled.view())?)?);
    }
    let mean = drops.iter().sum::<f64>() / repeats as f64;
    let var = drops.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / repeats as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermImportance {
    /// Descending by mean drop; ties keep column order.
    pub features: Vec<FeatureImportance>,
    pub repeats: usize,
    pub seed: u64,
}

impl PermImportance {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,mean_delta_ba,std_delta_ba\n");
        for f in &self.features {
            out += &format!("{},{},{}\n", f.feature, f.mean, f.std);
        }
        out
    }
}

pub fn permutation_importance_all(
    model: &dyn Classifier,
    x: ArrayView2<f64>,
    y: &[u8],
    names: &[String],
    repeats: usize,
    seed: u64,
) -> Result<PermImportance> {
    if names.len() != x.ncols() {
        return Err(Error::DimensionMismatch { expected: x.ncols(), got: names.len() });
    }
    let mut features = (0..x.ncols())
        .into_par_iter()
        .map(|j| {
            let (mean, std) = permutation_importance(model, x, y, j, repeats, seed)?;
            Ok(FeatureImportance { feature: names[j].clone(), mean, std })
        })
        .collect::<Result<Vec<_>>>()?;
    features.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    Ok(PermImportance { features, repeats, seed })
}

pub fn permutation_importance_named(
    model: &dyn Classifier,
    x: ArrayView2<f64>,
    y: &[u8],
    names: &[String],
    feature: &str,
    repeats: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let j = names.iter().position(|n| n == feature).ok_or_else(|| Error::UnknownFeature(feature.to_string()))?;
    permutation_importance(model, x, y, j, repeats, seed)
}

/// Background rows drawn per class in proportion to class size.
pub fn stratified_background(y: &[u8], size: usize, seed: u64) -> Vec<usize> {
    if size >= y.len() {
        return (0..y.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    let ones = y.iter().filter(|&&v| v == 1).count();
    let take1 = ((size as f64 * ones as f64 / y.len() as f64).round() as usize).min(ones);
    for (class, take) in [(0u8, size - take1), (1u8, take1)] {
        let mut rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        rows.shuffle(&mut rng);
        out.extend(rows.into_iter().take(take));
    }
    out.sort_unstable();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapResult {
    pub phi: Vec<f64>,
    pub base_value: f64,
    pub fx: f64,
    pub exact: bool,
}

impl ShapResult {
    /// `|Σφ + base − f(x)|`.
    pub fn efficiency_residual(&self) -> f64 {
        (self.phi.iter().sum::<f64>() + self.base_value - self.fx).abs()
    }
}

/// Interventional coalition value: mean model output with features outside
/// `mask` taken from each background row.
struct Game<'a> {
    model: &'a dyn Classifier,
    row: ArrayView1<'a, f64>,
    background: ArrayView2<'a, f64>,
}

impl Game<'_> {
    fn value(&self, mask: &[bool]) -> Result<f64> {
        let mut z = self.background.to_owned();
        for (j, &on) in mask.iter().enumerate() {
            if on {
                z.column_mut(j).fill(self.row[j]);
            }
        }
        let mut total = 0.0;
        for r in z.rows() {
            total += self.model.predict_proba(r)?;
        }
        Ok(total / z.nrows() as f64)
    }
}

fn check_inputs(row: ArrayView1<f64>, background: ArrayView2<f64>) -> Result<()> {
    if background.nrows() == 0 {
        return Err(Error::InvalidConfig("background set is empty".into()));
    }
    if background.ncols() != row.len() {
        return Err(Error::DimensionMismatch { expected: background.ncols(), got: row.len() });
    }
    Ok(())
}

/// Exact Shapley values by enumerating all `2^d` coalitions.
pub fn shap_exact(model: &dyn Classifier, row: ArrayView1<f64>, background: ArrayView2<f64>) -> Result<ShapResult> {
    check_inputs(row, background)?;
    let d = row.len();
    if d > 20 {
        return Err(Error::InvalidConfig(format!("{d} features is too many for enumeration")));
    }
    let game = Game { model, row, background };
    let values: Vec<f64> = (0..1usize << d)
        .into_par_iter()
        .map(|m| game.value(&(0..d).map(|j| m >> j & 1 == 1).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let fact: Vec<f64> = (0..=d).scan(1.0, |acc, k| {
        let out = *acc;
        *acc *= (k + 1) as f64;
        Some(out)
    }).collect();
    let mut phi = vec![0.0; d];
    for (m, &v) in values.iter().enumerate() {
        let s = (m as u32).count_ones() as usize;
        for (j, p) in phi.iter_mut().enumerate() {
            if m >> j & 1 == 0 {
                let w = fact[s] * fact[d - s - 1] / fact[d];
                *p += w * (values[m | 1 << j] - v);
            }
        }
    }
    Ok(ShapResult { phi, base_value: values[0], fx: values[(1 << d) - 1], exact: true })
}

/// Kernel-weighted coalition sampling with paired complements, solved as a
/// least-squares problem constrained to satisfy efficiency.
pub fn shap_sampled(
    model: &dyn Classifier,
    row: ArrayView1<f64>,
    background: ArrayView2<f64>,
    budget: usize,
    seed: u64,
) -> Result<ShapResult> {
    check_inputs(row, background)?;
    let d = row.len();
    let minimum = 2 * d + 2;
    if budget < minimum {
        return Err(Error::BudgetTooSmall { budget, minimum });
    }
    let game = Game { model, row, background };
    let base = game.value(&vec![false; d])?;
    let fx = game.value(&vec![true; d])?;
    if d == 1 {
        return Ok(ShapResult { phi: vec![fx - base], base_value: base, fx, exact: false });
    }
    // Coalition sizes 1..d-1 drawn with probability ∝ (d−1)/(s(d−s)).
    let size_w: Vec<f64> = (1..d).map(|s| (d - 1) as f64 / (s * (d - s)) as f64).collect();
    let total_w: f64 = size_w.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(budget);
    while masks.len() + 1 < budget {
        let mut u = rng.random::<f64>() * total_w;
        let mut s = 1;
        for (k, w) in size_w.iter().enumerate() {
            s = k + 1;
            if u < *w {
                break;
            }
            u -= w;
        }
        let mut idx: Vec<usize> = (0..d).collect();
        idx.shuffle(&mut rng);
        let mut mask = vec![false; d];
        for &j in &idx[..s] {
            mask[j] = true;
        }
        let complement = mask.iter().map(|b| !b).collect();
        masks.push(mask);
        masks.push(complement);
    }
    let values: Vec<f64> = masks.par_iter().map(|m| game.value(m)).collect::<Result<_>>()?;

    // Substitute φ_last = Δ − Σ others and solve the unconstrained problem.
    let delta = fx - base;
    let k = masks.len();
    let mut a = DMatrix::<f64>::zeros(k, d - 1);
    let mut b = DVector::<f64>::zeros(k);
    for (r, (mask, v)) in masks.iter().zip(&values).enumerate() {
        let last = mask[d - 1] as u8 as f64;
        for j in 0..d - 1 {
            a[(r, j)] = mask[j] as u8 as f64 - last;
        }
        b[r] = v - base - last * delta;
    }
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::NonFinite(format!("coalition regression failed: {e}")))?;
    let mut phi: Vec<f64> = sol.iter().copied().collect();
    phi.push(delta - phi.iter().sum::<f64>());
    Ok(ShapResult { phi, base_value: base, fx, exact: false })
}

/// Exact enumeration up to [`EXACT_MAX_FEATURES`] features, sampling above.
pub fn shap_values(
    model: &dyn Classifier,
    row: ArrayView1<f64>,
    background: ArrayView2<f64>,
    budget: usize,
    seed: u64,
) -> Result<ShapResult> {
    if row.len() <= EXACT_MAX_FEATURES {
        shap_exact(model, row, background)
    } else {
        shap_sampled(model, row, background, budget, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// One row per component, sorted by explained variance.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub cumulative_ratio: Vec<f64>,
    pub scores: Array2<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl PcaResult {
    /// Number of components whose cumulative ratio first reaches `level`.
    pub fn components_for(&self, level: f64) -> usize {
        self.cumulative_ratio.iter().position(|&c| c >= level - 1e-12).map_or(self.cumulative_ratio.len(), |i| i + 1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,explained_variance_ratio,cumulative_ratio\n");
        for (i, (r, c)) in self.explained_variance_ratio.iter().zip(&self.cumulative_ratio).enumerate() {
            out += &format!("{},{},{}\n", i + 1, r, c);
        }
        out
    }
}

fn column_stats(x: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("nonempty").to_vec();
    let sd = x
        .axis_iter(Axis(1))
        .zip(&mean)
        .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len() as f64).sqrt())
        .collect();
    (mean, sd)
}

pub fn pca(x: ArrayView2<f64>, standardize: bool) -> Result<PcaResult> {
    let (n, d) = x.dim();
    if n < 2 || d == 0 {
        return Err(Error::DegenerateData(format!("PCA needs at least 2 rows, got {n}")));
    }
    let (mean, sd) = column_stats(x);
    let scale: Vec<f64> = sd.iter().map(|&s| if standardize && s > 0.0 { s } else { 1.0 }).collect();
    let mut z = x.to_owned();
    for (j, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|v| (v - mean[j]) / scale[j]);
    }
    let cov = z.t().dot(&z) / (n - 1) as f64;
    let total: f64 = cov.diag().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateData("zero total variance".into()));
    }
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let explained_variance: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let sum: f64 = explained_variance.iter().sum();
    let explained_variance_ratio: Vec<f64> = explained_variance.iter().map(|v| v / sum).collect();
    let cumulative_ratio = explained_variance_ratio
        .iter()
        .scan(0.0, |acc, r| {
            *acc += r;
            Some(*acc)
        })
        .collect();
    let components = Array2::from_shape_fn((d, d), |(c, j)| eig.eigenvectors[(j, order[c])]);
    let scores = z.dot(&components.t());
    Ok(PcaResult { components, explained_variance, explained_variance_ratio, cumulative_ratio, scores, mean, scale })
}

/// Pearson correlation; a constant column correlates 0 with others.
pub fn correlation_matrix(x: ArrayView2<f64>) -> Array2<f64> {
    let d = x.ncols();
    let (mean, sd) = column_stats(x);
    let n = x.nrows() as f64;
    Array2::from_shape_fn((d, d), |(a, b)| {
        if a == b {
            return 1.0;
        }
        if sd[a] == 0.0 || sd[b] == 0.0 {
            return 0.0;
        }
        let cov = x.column(a).iter().zip(x.column(b)).map(|(p, q)| (p - mean[a]) * (q - mean[b])).sum::<f64>() / n;
        cov / (sd[a] * sd[b])
    })
}

pub fn matrix_to_csv(names: &[String], m: ArrayView2<f64>) -> String {
    let mut out = format!("feature,{}\n", names.join(","));
    for (name, row) in names.iter().zip(m.rows()) {
        out += name;
        for v in row {
            out += &format!(",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_feature_has_zero_importance() {
        let x = array![[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 3.0]];
        let model = |r: ArrayView1<f64>| if r[1] > 1.5 { 0.9 } else { 0.1 };
        let (mean, std) = permutation_importance(&model, x.view(), &[0, 0, 1, 1], 0, 10, 4).unwrap();
        assert_eq!((mean, std), (0.0, 0.0));
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(matches!(
            permutation_importance_named(&model, x.view(), &[0, 0, 1, 1], &names, "zz", 3, 0),
            Err(Error::UnknownFeature(_))
        ));
    }

    #[test]
    fn linear_model_closed_form() {
        let w = [0.5, -1.5, 2.0];
        let model = move |r: ArrayView1<f64>| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let bg = array![[0.0, 1.0, 2.0], [2.0, -1.0, 0.0], [1.0, 3.0, 1.0]];
        let row = array![4.0, 0.5, -1.0];
        let s = shap_exact(&model, row.view(), bg.view()).unwrap();
        let mean = bg.mean_axis(Axis(0)).unwrap();
        for j in 0..3 {
            assert!((s.phi[j] - w[j] * (row[j] - mean[j])).abs() < 1e-12);
        }
        assert!(s.efficiency_residual() < 1e-12);
    }

    #[test]
    fn sampled_mode_checks_budget() {
        let model = |r: ArrayView1<f64>| r[0];
        let row = Array1::zeros(5);
        let bg = Array2::zeros((2, 5));
        assert!(matches!(
            shap_sampled(&model, row.view(), bg.view(), 11, 0),
            Err(Error::BudgetTooSmall { budget: 11, minimum: 12 })
        ));
        assert!(shap_sampled(&model, row.view(), bg.view(), 12, 0).is_ok());
    }

    #[test]
    fn pca_on_correlated_pair() {
        let x = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [5.0, 10.0]];
        let r = pca(x.view(), true).unwrap();
        assert!((r.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert_eq!(r.components_for(0.95), 1);
        assert!(matches!(pca(array![[1.0, 1.0], [1.0, 1.0]].view(), true), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn correlation_basics() {
        let x = array![[1.0, 2.0, 5.0], [2.0, 4.0, 5.0], [3.0, 5.0, 5.0]];
        let c = correlation_matrix(x.view());
        assert_eq!(c[[0, 0]], 1.0);
        assert!(c[[0, 1]] > 0.9);
        assert_eq!(c[[0, 2]], 0.0);
        assert_eq!(c[[1, 0]], c[[0, 1]]);
    }

    #[test]
    fn background_is_stratified() {
        let y: Vec<u8> = (0..500).map(|i| (i % 5 != 0) as u8).collect();
        let bg = stratified_background(&y, 100, 1);
        assert_eq!(bg.len(), 100);
        assert_eq!(bg.iter().filter(|&&i| y[i] == 1).count(), 80);
    }
}
