use ndarray::ArrayView1;
use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{fit_classification_tree, DecisionTree, TreeConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features drawn per split; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig { n_trees: 200, max_features: None, max_depth: None, min_leaf: 2, bootstrap: true, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub max_features: usize,
    pub seed: u64,
}

/// Seed of tree `t`, derived from the master seed so trees can be grown in
/// any order.
fn tree_seed(master: u64, t: usize) -> u64 {
    ChaCha8Rng::seed_from_u64(master ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)).random()
}

pub fn fit_forest(x: ArrayView2<f64>, y: &[u8], config: &ForestConfig) -> Result<ForestModel> {
    if config.n_trees == 0 {
        return Err(Error::InvalidConfig("forest needs at least one tree".into()));
    }
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::LengthMismatch { left: x.nrows(), right: y.len() });
    }
    let d = x.ncols();
    let m = config.max_features.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).clamp(1, d);
    let tree_cfg = TreeConfig { max_depth: config.max_depth, min_leaf: config.min_leaf, max_features: Some(m) };
    let n = y.len();
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(config.seed, t));
            let rows: Vec<usize> =
                if config.bootstrap { (0..n).map(|_| rng.random_range(0..n)).collect() } else { (0..n).collect() };
            fit_classification_tree(x, y, None, &rows, &tree_cfg, &mut rng)
        })
        .collect();
    Ok(ForestModel { trees, max_features: m, seed: config.seed })
}

impl ForestModel {
    /// Mean of the trees' leaf class-1 frequencies.
    pub fn predict_proba(&self, row: ArrayView1<f64>) -> f64 {
        self.trees.iter().map(|t| t.predict_proba(row)).sum::<f64>() / self.trees.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn toy() -> (Array2<f64>, Vec<u8>) {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| ((i * 5 + j * 11) % 23) as f64);
        let y = (0..40).map(|i| ((i * 5) % 23 > 11) as u8).collect();
        (x, y)
    }

    #[test]
    fn degenerate_forest_equals_single_tree() {
        let (x, y) = toy();
        let cfg = ForestConfig { n_trees: 1, max_features: Some(3), bootstrap: false, min_leaf: 2, ..Default::default() };
        let f = fit_forest(x.view(), &y, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<usize> = (0..40).collect();
        let tcfg = TreeConfig { max_depth: None, min_leaf: 2, max_features: None };
        let t = fit_classification_tree(x.view(), &y, None, &rows, &tcfg, &mut rng);
        for i in 0..40 {
            assert_eq!(f.predict_proba(x.row(i)), t.predict_proba(x.row(i)));
        }
    }

    #[test]
    fn pure_labels_give_certain_posteriors() {
        let (x, _) = toy();
        let f = fit_forest(x.view(), &[1; 40], &ForestConfig { n_trees: 5, ..Default::default() }).unwrap();
        assert_eq!(f.predict_proba(array![100.0, -3.0, 2.0].view()), 1.0);
    }

    #[test]
    fn posterior_is_mean_of_trees_and_order_free() {
        let (x, y) = toy();
        let f = fit_forest(x.view(), &y, &ForestConfig { n_trees: 7, seed: 3, ..Default::default() }).unwrap();
        let mut rev = f.clone();
        rev.trees.reverse();
        for i in 0..40 {
            let mean = f.trees.iter().map(|t| t.predict_proba(x.row(i))).sum::<f64>() / 7.0;
            let p = f.predict_proba(x.row(i));
            assert!((p - mean).abs() < 1e-12);
            assert!((p - rev.predict_proba(x.row(i))).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn deterministic_per_seed_and_min_leaf_holds() {
        let (x, y) = toy();
        let cfg = ForestConfig { n_trees: 6, seed: 9, min_leaf: 3, ..Default::default() };
        let a = fit_forest(x.view(), &y, &cfg).unwrap();
        let b = fit_forest(x.view(), &y, &cfg).unwrap();
        assert_eq!(a, b);
        for t in &a.trees {
            assert!(t.root.leaves().iter().all(|&(_, n)| n >= 3));
        }
    }
}
