use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::stratified_kfold;
use crate::linear::{fit_logistic, sigmoid, LogisticConfig, LogisticModel, Penalty};
use crate::model::{Classifier, FittedModel, ModelSpec};
use crate::tree::{fit_classification_tree, DecisionTree, TreeConfig};

pub const DEFAULT_TIE_BREAK: &str = "mlp";

/// Majority of `votes`; an exact tie goes to the vote of `tie_break`.
pub fn hard_vote_labels(names: &[String], votes: &[u8], tie_break: &str) -> Result<u8> {
    if names.len() != votes.len() || votes.is_empty() {
        return Err(Error::LengthMismatch { left: names.len(), right: votes.len() });
    }
    let ones = votes.iter().filter(|&&v| v == 1).count();
    let zeros = votes.len() - ones;
    if ones != zeros {
        return Ok((ones > zeros) as u8);
    }
    let idx = names
        .iter()
        .position(|n| n == tie_break)
        .ok_or_else(|| Error::InvalidConfig(format!("tie-break member {tie_break} is not in the panel")))?;
    Ok(votes[idx])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftWeights(Vec<f64>);

impl SoftWeights {
    /// Normalizes nonnegative weights to sum 1.
    pub fn new(raw: &[f64]) -> Result<SoftWeights> {
        let total: f64 = raw.iter().sum();
        if raw.is_empty() || raw.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || total <= 0.0 {
            return Err(Error::InvalidConfig(format!("soft-vote weights {raw:?} must be nonnegative with a positive sum")));
        }
        Ok(SoftWeights(raw.iter().map(|w| w / total).collect()))
    }

    pub fn uniform(m: usize) -> Result<SoftWeights> {
        SoftWeights::new(&vec![1.0; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Convex combination of member posteriors `p(y=1)`; returns the class and
/// `[p0, p1]`. A combined 0.5 goes to class 1.
pub fn soft_vote_posteriors(posteriors: &[f64], weights: &SoftWeights) -> Result<(u8, [f64; 2])> {
    if posteriors.len() != weights.0.len() {
        return Err(Error::WeightMismatch { weights: weights.0.len(), members: posteriors.len() });
    }
    let p1: f64 = posteriors.iter().zip(&weights.0).map(|(p, w)| p * w).sum();
    let p0: f64 = posteriors.iter().zip(&weights.0).map(|(p, w)| (1.0 - p) * w).sum();
    Ok(((p1 >= p0) as u8, [p0, p1]))
}

#[derive(Clone)]
pub struct Member {
    pub name: String,
    pub model: Arc<dyn Classifier>,
}

impl Member {
    pub fn new(name: &str, model: impl Classifier + 'static) -> Member {
        Member { name: name.to_string(), model: Arc::new(model) }
    }
}

impl std::fmt::Debug for Member {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Member").field("name", &self.name).finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub struct VotePanel {
    pub members: Vec<Member>,
    pub tie_break: String,
}

impl VotePanel {
    pub fn new(members: Vec<Member>, tie_break: &str) -> Result<VotePanel> {
        if members.is_empty() {
            return Err(Error::InvalidConfig("vote panel needs a member".into()));
        }
        if !members.iter().any(|m| m.name == tie_break) {
            return Err(Error::InvalidConfig(format!("tie-break member {tie_break} is not in the panel")));
        }
        Ok(VotePanel { members, tie_break: tie_break.to_string() })
    }

    pub fn from_models(models: Vec<FittedModel>, tie_break: &str) -> Result<VotePanel> {
        VotePanel::new(models.into_iter().map(|m| Member { name: m.name.clone(), model: Arc::new(m) }).collect(), tie_break)
    }

    pub fn names(&self) -> Vec<String> {
        self.members.iter().map(|m| m.name.clone()).collect()
    }

    pub fn votes(&self, row: ArrayView1<f64>) -> Result<Vec<u8>> {
        self.members.iter().map(|m| m.model.predict(row)).collect()
    }

    pub fn posteriors(&self, row: ArrayView1<f64>) -> Result<Vec<f64>> {
        self.members.iter().map(|m| m.model.predict_proba(row)).collect()
    }

    pub fn hard_vote(&self, row: ArrayView1<f64>) -> Result<u8> {
        hard_vote_labels(&self.names(), &self.votes(row)?, &self.tie_break)
    }

    pub fn soft_vote(&self, row: ArrayView1<f64>, weights: &SoftWeights) -> Result<(u8, [f64; 2])> {
        soft_vote_posteriors(&self.posteriors(row)?, weights)
    }
}

/// Fraction of member votes for class 1, as a posterior-like score for the
/// hard vote; ties resolved as in [`VotePanel::hard_vote`].
impl Classifier for VotePanel {
    fn predict_proba(&self, row: ArrayView1<f64>) -> Result<f64> {
        let votes = self.votes(row)?;
        Ok(votes.iter().map(|&v| v as f64).sum::<f64>() / votes.len() as f64)
    }

    fn predict(&self, row: ArrayView1<f64>) -> Result<u8> {
        self.hard_vote(row)
    }
}

/// Out-of-fold meta-features plus the bookkeeping needed to audit them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutOfFold {
    /// `n × members`, entry `(i, m)` from member `m` fitted without row `i`.
    pub features: Array2<f64>,
    pub fold: Vec<usize>,
    /// Sorted training rows handed to the fit of each fold.
    pub training_rows: Vec<Vec<usize>>,
    /// Fold whose model produced each row's meta-features.
    pub producer: Vec<usize>,
}

impl OutOfFold {
    /// Checks that no row's meta-feature came from a model trained on it.
    pub fn audit(&self) -> Result<()> {
        for (i, &f) in self.producer.iter().enumerate() {
            if self.training_rows[f].binary_search(&i).is_ok() {
                return Err(Error::DegenerateFold(format!("row {i} leaked into fold {f} training")));
            }
        }
        Ok(())
    }
}

pub type FitFn<'a> = dyn Fn(ArrayView2<f64>, &[u8]) -> Result<Box<dyn Classifier>> + Sync + 'a;

pub fn out_of_fold(x: ArrayView2<f64>, y: &[u8], members: &[&FitFn], k: usize, seed: u64) -> Result<OutOfFold> {
    let fold = stratified_kfold(y, k, seed)?;
    let n = y.len();
    let training_rows: Vec<Vec<usize>> = (0..k).map(|f| (0..n).filter(|&i| fold[i] != f).collect()).collect();
    let jobs: Vec<(usize, usize)> = (0..members.len()).flat_map(|m| (0..k).map(move |f| (m, f))).collect();
    let cols = jobs
        .par_iter()
        .map(|&(m, f)| {
            let rows = &training_rows[f];
            let tx = x.select(Axis(0), rows);
            let ty: Vec<u8> = rows.iter().map(|&i| y[i]).collect();
            let model = members[m](tx.view(), &ty)?;
            (0..n).filter(|&i| fold[i] == f).map(|i| Ok((i, model.predict_proba(x.row(i))?))).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut features = Array2::zeros((n, members.len()));
    for (&(m, _), col) in jobs.iter().zip(cols) {
        for (i, p) in col {
            features[[i, m]] = p;
        }
    }
    Ok(OutOfFold { features, producer: fold.clone(), fold, training_rows })
}

#[derive(Clone, Debug)]
pub struct StackModel {
    pub members: Vec<Member>,
    pub meta: LogisticModel,
    pub k: usize,
    pub oof: OutOfFold,
}

pub fn meta_config() -> LogisticConfig {
    LogisticConfig { penalty: Penalty::L2, lambda: 1.0, ..Default::default() }
}

/// Generic stacking over fit closures; base members are refit on all rows.
pub fn stack_fit_with(x: ArrayView2<f64>, y: &[u8], names: &[String], members: &[&FitFn], k: usize, seed: u64) -> Result<StackModel> {
    let oof = out_of_fold(x, y, members, k, seed)?;
    oof.audit()?;
    let (meta, _) = fit_logistic(oof.features.view(), y, &meta_config())?;
    let full = members
        .par_iter()
        .zip(names.par_iter())
        .map(|(fit, name)| Ok(Member { name: name.clone(), model: Arc::from(fit(x, y)?) }))
        .collect::<Result<Vec<_>>>()?;
    Ok(StackModel { members: full, meta, k, oof })
}

pub fn stack_fit(
    x: ArrayView2<f64>,
    y: &[u8],
    categorical: &[bool],
    specs: &[(String, ModelSpec)],
    k: usize,
    seed: u64,
) -> Result<StackModel> {
    let fits: Vec<Box<FitFn>> = specs
        .iter()
        .map(|(name, spec)| {
            let f: Box<FitFn> = Box::new(move |tx: ArrayView2<f64>, ty: &[u8]| {
                Ok(Box::new(spec.fit(name, tx, ty, categorical)?) as Box<dyn Classifier>)
            });
            f
        })
        .collect();
    let refs: Vec<&FitFn> = fits.iter().map(|b| b.as_ref()).collect();
    let names: Vec<String> = specs.iter().map(|(n, _)| n.clone()).collect();
    stack_fit_with(x, y, &names, &refs, k, seed)
}

impl StackModel {
    pub fn meta_features(&self, row: ArrayView1<f64>) -> Result<ndarray::Array1<f64>> {
        self.members.iter().map(|m| m.model.predict_proba(row)).collect::<Result<Vec<_>>>().map(ndarray::Array1::from)
    }
}

impl Classifier for StackModel {
    fn predict_proba(&self, row: ArrayView1<f64>) -> Result<f64> {
        self.meta.predict_proba(self.meta_features(row)?.view())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaBoostConfig {
    pub n_stages: usize,
    pub weak_depth: usize,
}

impl Default for AdaBoostConfig {
    fn default() -> Self {
        AdaBoostConfig { n_stages: 50, weak_depth: 1 }
    }
}

/// `½ ln((1 − ε)/ε)`, with ε floored so a perfect stage gets a finite weight.
pub fn stage_weight(eps: f64) -> f64 {
    let e = eps.max(1e-10);
    0.5 * ((1.0 - e) / e).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaBoostModel {
    pub stages: Vec<(DecisionTree, f64)>,
    /// Sample-weight sums recorded after each accepted stage.
    pub weight_sums: Vec<f64>,
    pub stop_reason: String,
}

pub fn adaboost_fit(x: ArrayView2<f64>, y: &[u8], config: &AdaBoostConfig) -> Result<AdaBoostModel> {
    if config.n_stages == 0 {
        return Err(Error::InvalidConfig("AdaBoost needs at least one stage".into()));
    }
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::LengthMismatch { left: x.nrows(), right: y.len() });
    }
    let n = y.len();
    let rows: Vec<usize> = (0..n).collect();
    let mut w = vec![1.0 / n as f64; n];
    let tree_cfg = TreeConfig { max_depth: Some(config.weak_depth), min_leaf: 1, max_features: None };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = AdaBoostModel { stages: Vec::new(), weight_sums: Vec::new(), stop_reason: "max_stages".into() };
    for _ in 0..config.n_stages {
        let tree = fit_classification_tree(x, y, Some(&w), &rows, &tree_cfg, &mut rng);
        let h: Vec<u8> = (0..n).map(|i| (tree.predict_proba(x.row(i)) >= 0.5) as u8).collect();
        let eps: f64 = (0..n).filter(|&i| h[i] != y[i]).map(|i| w[i]).sum();
        if eps >= 0.5 {
            model.stop_reason = "uninformative_stage".into();
            break;
        }
        let alpha = stage_weight(eps);
        for i in 0..n {
            w[i] *= if h[i] == y[i] { (-alpha).exp() } else { alpha.exp() };
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        model.weight_sums.push(w.iter().sum());
        model.stages.push((tree, alpha));
        if eps == 0.0 {
            model.stop_reason = "perfect_stage".into();
            break;
        }
    }
    Ok(model)
}

impl AdaBoostModel {
    /// `Σ α_m h_m(x)` with `h ∈ {−1, +1}`.
    pub fn score(&self, row: ArrayView1<f64>) -> f64 {
        self.stages.iter().map(|(t, a)| if t.predict_proba(row) >= 0.5 { *a } else { -*a }).sum()
    }
}

impl Classifier for AdaBoostModel {
    fn predict_proba(&self, row: ArrayView1<f64>) -> Result<f64> {
        Ok(sigmoid(2.0 * self.score(row)))
    }

    fn predict(&self, row: ArrayView1<f64>) -> Result<u8> {
        Ok((self.score(row) >= 0.0) as u8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hard_vote_examples() {
        let roster = names(&["lr", "svm", "nb", "rf", "xgb", "mlp"]);
        assert_eq!(hard_vote_labels(&roster, &[1, 1, 0, 0, 1, 0], "mlp").unwrap(), 0);
        assert_eq!(hard_vote_labels(&roster, &[1, 1, 1, 0, 1, 0], "mlp").unwrap(), 1);
        assert_eq!(hard_vote_labels(&roster, &[0, 0, 0, 1, 0, 1], "mlp").unwrap(), 0);
        assert_eq!(hard_vote_labels(&names(&["mlp"]), &[1], "mlp").unwrap(), 1);
        assert!(hard_vote_labels(&roster, &[1, 1, 1, 0, 0, 0], "ghost").is_err());
    }

    #[test]
    fn soft_vote_examples() {
        let w = SoftWeights::new(&[0.25, 0.75]).unwrap();
        let (c, p) = soft_vote_posteriors(&[0.9, 0.4], &w).unwrap();
        assert_eq!(c, 1);
        assert!((p[1] - 0.525).abs() < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        let solo = SoftWeights::new(&[0.0, 3.0]).unwrap();
        assert_eq!(soft_vote_posteriors(&[0.1, 0.3], &solo).unwrap(), (0, [0.7, 0.3]));
        assert_eq!(soft_vote_posteriors(&[0.5, 0.5], &SoftWeights::uniform(2).unwrap()).unwrap().0, 1);
        assert!(matches!(soft_vote_posteriors(&[0.5], &w), Err(Error::WeightMismatch { .. })));
        assert!(SoftWeights::new(&[-1.0, 2.0]).is_err());
    }

    #[test]
    fn panel_uses_member_votes() {
        let panel = VotePanel::new(
            vec![
                Member::new("a", |r: ArrayView1<f64>| if r[0] > 0.0 { 0.9 } else { 0.1 }),
                Member::new("b", |_: ArrayView1<f64>| 0.2),
                Member::new("mlp", |r: ArrayView1<f64>| if r[0] > 5.0 { 0.6 } else { 0.3 }),
                Member::new("d", |_: ArrayView1<f64>| 0.7),
            ],
            "mlp",
        )
        .unwrap();
        assert_eq!(panel.hard_vote(array![1.0].view()).unwrap(), 0);
        assert_eq!(panel.hard_vote(array![6.0].view()).unwrap(), 1);
        assert!(VotePanel::new(vec![Member::new("x", |_: ArrayView1<f64>| 0.5)], "mlp").is_err());
    }

    fn toy(n: usize) -> (Array2<f64>, Vec<u8>) {
        let x = Array2::from_shape_fn((n, 2), |(i, j)| ((i * (3 + j * 4)) % 17) as f64);
        let y = (0..n).map(|i| (x[[i, 0]] > 7.0) as u8).collect();
        (x, y)
    }

    #[test]
    fn constant_member_gives_constant_column_and_audit_passes() {
        let (x, y) = toy(30);
        let constant: &FitFn = &|_, _| Ok(Box::new(|_: ArrayView1<f64>| 0.7) as Box<dyn Classifier>);
        let oof = out_of_fold(x.view(), &y, &[constant], 5, 3).unwrap();
        assert!(oof.features.column(0).iter().all(|&v| v == 0.7));
        oof.audit().unwrap();
        let mut leaky = oof.clone();
        leaky.producer[0] = (leaky.fold[0] + 1) % 5;
        assert!(leaky.audit().is_err());
    }

    #[test]
    fn meta_learner_trusts_the_oracle() {
        let (x, y) = toy(60);
        let oracle: &FitFn = &|_, _| Ok(Box::new(|r: ArrayView1<f64>| if r[0] > 7.0 { 0.95 } else { 0.05 }) as Box<dyn Classifier>);
        let coin: &FitFn = &|_, _| Ok(Box::new(|r: ArrayView1<f64>| if (r[1] as u64) % 2 == 0 { 0.9 } else { 0.1 }) as Box<dyn Classifier>);
        let s = stack_fit_with(x.view(), &y, &names(&["oracle", "coin"]), &[oracle, coin], 5, 1).unwrap();
        assert!(s.meta.weights[0].abs() > s.meta.weights[1].abs());
        for i in 0..60 {
            assert_eq!(s.predict(x.row(i)).unwrap(), y[i]);
        }
    }

    #[test]
    fn stage_weight_values() {
        assert!((stage_weight(0.25) - 0.5 * 3f64.ln()).abs() < 1e-12);
        assert!((stage_weight(0.25) - 0.5493).abs() < 1e-4);
        assert_eq!(stage_weight(0.5), 0.0);
    }

    #[test]
    fn adaboost_weights_stay_normalized() {
        let x = Array2::from_shape_fn((40, 2), |(i, j)| ((i * (5 + j * 6)) % 19) as f64);
        let y: Vec<u8> = (0..40).map(|i| ((x[[i, 0]] > 9.0) ^ (x[[i, 1]] > 9.0)) as u8).collect();
        let m = adaboost_fit(x.view(), &y, &AdaBoostConfig { n_stages: 20, weak_depth: 1 }).unwrap();
        assert!(!m.stages.is_empty());
        assert!(m.weight_sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert!(m.stages.iter().all(|(t, a)| t.root.depth() <= 1 && *a > 0.0));
    }

    #[test]
    fn adaboost_halts_on_perfect_and_uninformative_stages() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let perfect = adaboost_fit(x.view(), &[0, 0, 1, 1], &AdaBoostConfig::default()).unwrap();
        assert_eq!((perfect.stages.len(), perfect.stop_reason.as_str()), (1, "perfect_stage"));
        assert_eq!(perfect.predict(array![2.5].view()).unwrap(), 1);
        let flat = array![[1.0], [1.0], [1.0], [1.0]];
        let none = adaboost_fit(flat.view(), &[0, 1, 0, 1], &AdaBoostConfig::default()).unwrap();
        assert_eq!((none.stages.len(), none.stop_reason.as_str()), (0, "uninformative_stage"));
    }
}
