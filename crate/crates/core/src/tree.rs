//! Binary decision trees shared by the forest, the boosted ensemble and
//! AdaBoost.
//!
//! Candidate thresholds are midpoints between consecutive distinct sorted
//! values. Rows with `x <= threshold` go left. Among equal gains the lowest
//! feature index wins, then the lowest threshold.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Relative slack under which two gains count as tied.
pub const GAIN_TIE_EPS: f64 = 1e-12;

/// Gini impurity `1 - Σ p_k²` of a label multiset.
pub fn gini(labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let p1 = labels.iter().filter(|&&y| y == 1).count() as f64 / labels.len() as f64;
    gini_from_fraction(p1)
}

fn gini_from_fraction(p1: f64) -> f64 {
    1.0 - p1 * p1 - (1.0 - p1) * (1.0 - p1)
}

/// Second-order split gain of a `(left, right)` partition:
/// `½[G_L²/(H_L+λ) + G_R²/(H_R+λ) − (G_L+G_R)²/(H_L+H_R+λ)] − γ`.
pub fn boost_gain(g_left: f64, h_left: f64, g_right: f64, h_right: f64, lambda: f64, gamma: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(g_left, h_left) + score(g_right, h_right) - score(g_left + g_right, h_left + h_right)) - gamma
}

/// Optimal leaf weight `−G/(H+λ)`.
pub fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    -g / (h + lambda)
}

#[derive(Clone, Copy, Debug)]
pub enum Criterion<'a> {
    /// Impurity decrease of (optionally weighted) Gini.
    Gini { labels: &'a [u8], weights: Option<&'a [f64]> },
    /// Second-order boosting gain.
    Boost { grad: &'a [f64], hess: &'a [f64], lambda: f64, gamma: f64 },
}

/// Running sums for one side of a split.
#[derive(Clone, Copy, Default)]
struct Stats {
    count: usize,
    a: f64,
    b: f64,
}

impl Criterion<'_> {
    fn stats_of(&self, i: usize) -> (f64, f64) {
        match *self {
            Criterion::Gini { labels, weights } => {
                let w = weights.map_or(1.0, |w| w[i]);
                (w, w * labels[i] as f64)
            }
            Criterion::Boost { grad, hess, .. } => (grad[i], hess[i]),
        }
    }

    fn gain(&self, left: Stats, right: Stats) -> f64 {
        match *self {
            Criterion::Gini { .. } => {
                // a = total weight, b = class-1 weight.
                let total = left.a + right.a;
                if total <= 0.0 || left.a <= 0.0 || right.a <= 0.0 {
                    return 0.0;
                }
                let parent = gini_from_fraction((left.b + right.b) / total);
                let l = gini_from_fraction(left.b / left.a);
                let r = gini_from_fraction(right.b / right.a);
                parent - (left.a / total) * l - (right.a / total) * r
            }
            Criterion::Boost { lambda, gamma, .. } => boost_gain(left.a, left.b, right.a, right.b, lambda, gamma),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

pub(crate) fn improves(gain: f64, best: f64) -> bool {
    gain > best + GAIN_TIE_EPS * best.abs().max(1.0)
}

/// Best split of `rows` over `features` (scanned in ascending order), or
/// `None` when no candidate leaves `min_leaf` rows on each side with a
/// positive gain.
pub fn best_split(x: ArrayView2<f64>, rows: &[usize], features: &[usize], criterion: &Criterion, min_leaf: usize) -> Option<Split> {
    let min_leaf = min_leaf.max(1);
    if rows.len() < 2 * min_leaf {
        return None;
    }
    let mut total = Stats::default();
    for &i in rows {
        let (a, b) = criterion.stats_of(i);
        total = Stats { count: total.count + 1, a: total.a + a, b: total.b + b };
    }
    let mut sorted_features = features.to_vec();
    sorted_features.sort_unstable();
    sorted_features.dedup();

    let mut best: Option<Split> = None;
    let mut order = rows.to_vec();
    for &f in &sorted_features {
        order.sort_by(|&p, &q| x[[p, f]].total_cmp(&x[[q, f]]));
        let mut left = Stats::default();
        for k in 0..order.len() - 1 {
            let (a, b) = criterion.stats_of(order[k]);
            left = Stats { count: left.count + 1, a: left.a + a, b: left.b + b };
            let (v, next) = (x[[order[k], f]], x[[order[k + 1], f]]);
            if v == next {
                continue;
            }
            let right = Stats { count: total.count - left.count, a: total.a - left.a, b: total.b - left.b };
            if left.count < min_leaf || right.count < min_leaf {
                continue;
            }
            let gain = criterion.gain(left, right);
            if gain > 0.0 && best.is_none_or(|s| improves(gain, s.gain)) {
                best = Some(Split { feature: f, threshold: (v + next) / 2.0, gain });
            }
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    /// `value` is the class-1 frequency (classification) or leaf score
    /// (boosting); `n` counts the training rows that reached the leaf.
    Leaf { value: f64, n: usize },
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
}

impl Node {
    pub fn eval(&self, row: ArrayView1<f64>) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { value, .. } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaves(&self) -> Vec<(f64, usize)> {
        match self {
            Node::Leaf { value, n } => vec![(*value, *n)],
            Node::Split { left, right, .. } => {
                let mut v = left.leaves();
                v.extend(right.leaves());
                v
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features drawn per split; `None` means all.
    pub max_features: Option<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig { max_depth: None, min_leaf: 1, max_features: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub root: Node,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
}

impl DecisionTree {
    pub fn predict_proba(&self, row: ArrayView1<f64>) -> f64 {
        self.root.eval(row)
    }
}

/// Grows a classification tree on `rows` (repeats allowed, for bootstrap).
pub fn fit_classification_tree<R: Rng>(
    x: ArrayView2<f64>,
    y: &[u8],
    weights: Option<&[f64]>,
    rows: &[usize],
    config: &TreeConfig,
    rng: &mut R,
) -> DecisionTree {
    let criterion = Criterion::Gini { labels: y, weights };
    let leaf = |rows: &[usize]| {
        let (mut w, mut w1) = (0.0, 0.0);
        for &i in rows {
            let wi = weights.map_or(1.0, |w| w[i]);
            w += wi;
            w1 += wi * y[i] as f64;
        }
        Node::Leaf { value: if w > 0.0 { w1 / w } else { 0.5 }, n: rows.len() }
    };
    let root = grow(x, rows, 0, config, rng, &criterion, &leaf, &|rows| {
        rows.iter().all(|&i| y[i] == y[rows[0]])
    });
    DecisionTree { root, max_depth: config.max_depth, min_leaf: config.min_leaf }
}

/// Grows a regression tree on gradient statistics with leaf weights
/// `−G/(H+λ)`.
pub fn fit_boost_tree<R: Rng>(
    x: ArrayView2<f64>,
    grad: &[f64],
    hess: &[f64],
    rows: &[usize],
    lambda: f64,
    gamma: f64,
    config: &TreeConfig,
    rng: &mut R,
) -> Node {
    let criterion = Criterion::Boost { grad, hess, lambda, gamma };
    let leaf = |rows: &[usize]| {
        let g: f64 = rows.iter().map(|&i| grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| hess[i]).sum();
        Node::Leaf { value: leaf_weight(g, h, lambda), n: rows.len() }
    };
    grow(x, rows, 0, config, rng, &criterion, &leaf, &|_| false)
}

#[allow(clippy::too_many_arguments)]
fn grow<R: Rng>(
    x: ArrayView2<f64>,
    rows: &[usize],
    depth: usize,
    config: &TreeConfig,
    rng: &mut R,
    criterion: &Criterion,
    leaf: &dyn Fn(&[usize]) -> Node,
    pure: &dyn Fn(&[usize]) -> bool,
) -> Node {
    if config.max_depth.is_some_and(|d| depth >= d) || pure(rows) {
        return leaf(rows);
    }
    let d = x.ncols();
    let features: Vec<usize> = match config.max_features {
        Some(m) if m < d => sample(rng, d, m.max(1)).into_vec(),
        _ => (0..d).collect(),
    };
    let Some(split) = best_split(x, rows, &features, criterion, config.min_leaf) else {
        return leaf(rows);
    };
    let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[[i, split.feature]] <= split.threshold);
    Node::Split {
        feature: split.feature,
        threshold: split.threshold,
        left: Box::new(grow(x, &l, depth + 1, config, rng, criterion, leaf, pure)),
        right: Box::new(grow(x, &r, depth + 1, config, rng, criterion, leaf, pure)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[1, 1, 0, 0]), 0.5);
        assert_eq!(gini(&[1, 1, 1]), 0.0);
        assert_eq!(gini(&[0, 1, 1, 0, 1]), gini(&[1, 1, 1, 0, 0]));
    }

    #[test]
    fn worked_boost_example() {
        let x = array![[0.0], [0.0], [1.0]];
        let y = [1.0, 1.0, 0.0];
        let grad: Vec<f64> = y.iter().map(|yi| 0.5 - yi).collect();
        let hess = vec![0.25; 3];
        let c = Criterion::Boost { grad: &grad, hess: &hess, lambda: 1.0, gamma: 0.0 };
        let s = best_split(x.view(), &[0, 1, 2], &[0], &c, 1).unwrap();
        assert_eq!((s.feature, s.threshold), (0, 0.5));
        assert!((s.gain - 0.361905).abs() < 1e-6);
        let by_hand = 0.5 * (1.0 / 1.5 + 0.25 / 1.25 - 0.25 / 1.75);
        assert!((s.gain - by_hand).abs() < 1e-15);
        assert!((leaf_weight(-1.0, 0.5, 1.0) - 0.666_666_7).abs() < 1e-6);
        assert!((leaf_weight(0.5, 0.25, 1.0) + 0.4).abs() < 1e-12);
    }

    #[test]
    fn large_gamma_suppresses_the_split() {
        let x = array![[0.0], [0.0], [1.0]];
        let grad = [-0.5, -0.5, 0.5];
        let hess = [0.25; 3];
        let c = Criterion::Boost { grad: &grad, hess: &hess, lambda: 1.0, gamma: 0.37 };
        assert!(best_split(x.view(), &[0, 1, 2], &[0], &c, 1).is_none());
    }

    #[test]
    fn constant_feature_has_no_split() {
        let x = array![[3.0], [3.0], [3.0], [3.0]];
        let y = [0, 1, 0, 1];
        let c = Criterion::Gini { labels: &y, weights: None };
        assert!(best_split(x.view(), &[0, 1, 2, 3], &[0], &c, 1).is_none());
    }

    #[test]
    fn classification_tree_respects_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = ndarray::Array2::from_shape_fn((60, 3), |(i, j)| ((i * 7 + j * 13) % 17) as f64);
        let y: Vec<u8> = (0..60).map(|i| ((i * 7) % 17 > 8) as u8).collect();
        let rows: Vec<usize> = (0..60).collect();
        let cfg = TreeConfig { max_depth: Some(3), min_leaf: 4, max_features: None };
        let t = fit_classification_tree(x.view(), &y, None, &rows, &cfg, &mut rng);
        assert!(t.root.depth() <= 3);
        assert!(t.root.leaves().iter().all(|&(_, n)| n >= 4));
        let acc = (0..60).filter(|&i| (t.predict_proba(x.row(i)) >= 0.5) as u8 == y[i]).count();
        assert_eq!(acc, 60);
    }
}
