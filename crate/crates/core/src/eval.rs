//! Stratified splitting, confusion matrices and classification reports.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub fraction: f64,
    pub seed: u64,
}

impl SplitAssignment {
    /// Row indices into the dataset the split was drawn from.
    pub fn indices(&self, data: &LabeledDataset) -> Result<(Vec<usize>, Vec<usize>)> {
        let pos = |id: &String| {
            data.ids.iter().position(|x| x == id).ok_or_else(|| Error::SchemaMismatch(format!("unknown id {id}")))
        };
        Ok((
            self.train_ids.iter().map(pos).collect::<Result<_>>()?,
            self.test_ids.iter().map(pos).collect::<Result<_>>()?,
        ))
    }

    pub fn apply(&self, data: &LabeledDataset) -> Result<(LabeledDataset, LabeledDataset)> {
        let (tr, te) = self.indices(data)?;
        Ok((data.subset(&tr), data.subset(&te)))
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

fn class_rows(labels: &[u8]) -> [Vec<usize>; 2] {
    let mut rows = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        rows[y as usize].push(i);
    }
    rows
}

/// Per-class test size is `round_half_up(fraction * class_count)`; rows are
/// drawn uniformly within each class. Output ids keep dataset order.
pub fn stratified_split(data: &LabeledDataset, test_fraction: f64, seed: u64) -> Result<SplitAssignment> {
    let in_test = stratified_holdout(&data.labels, test_fraction, seed)?;
    let (mut train_ids, mut test_ids) = (Vec::new(), Vec::new());
    for (i, id) in data.ids.iter().enumerate() {
        if in_test[i] {
            test_ids.push(id.clone());
        } else {
            train_ids.push(id.clone());
        }
    }
    Ok(SplitAssignment { train_ids, test_ids, fraction: test_fraction, seed })
}

/// Index-level form of [`stratified_split`]: `true` marks held-out rows.
pub fn stratified_holdout(labels: &[u8], test_fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("test fraction {test_fraction} not in (0,1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_test = vec![false; labels.len()];
    for (class, mut rows) in class_rows(labels).into_iter().enumerate() {
        let k = round_half_up(test_fraction * rows.len() as f64);
        if k == 0 || k >= rows.len() {
            return Err(Error::DegenerateClass(format!(
                "class {class} with {} rows cannot fill both sides of the split",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        for &i in &rows[..k] {
            in_test[i] = true;
        }
    }
    Ok(in_test)
}

/// Stratified k-fold assignment: `fold[i]` is the held-out fold of row `i`.
/// Rows of each class are shuffled and dealt round-robin.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::DegenerateFold(format!("k = {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut offset = 0;
    for (class, mut rows) in class_rows(labels).into_iter().enumerate() {
        if rows.len() < k {
            return Err(Error::DegenerateFold(format!("class {class} has {} rows for {k} folds", rows.len())));
        }
        rows.shuffle(&mut rng);
        for (r, &i) in rows.iter().enumerate() {
            fold[i] = (r + offset) % k;
        }
        offset += rows.len();
    }
    Ok(fold)
}

/// Rows are true class, columns predicted class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 2]; 2],
}

impl ConfusionMatrix {
    pub fn new(counts: [[usize; 2]; 2]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

pub fn confusion(y_true: &[u8], y_pred: &[u8]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch { left: y_true.len(), right: y_pred.len() });
    }
    if y_true.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        cm.counts[t as usize][p as usize] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub per_class: [ClassMetrics; 2],
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub balanced_accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Standard binary classification report; 0/0 ratios are reported as 0.
pub fn report(cm: &ConfusionMatrix) -> EvalReport {
    let c = &cm.counts;
    let total = cm.total();
    let per_class = [0usize, 1].map(|k| {
        let tp = c[k][k];
        let support = c[k][0] + c[k][1];
        let predicted = c[0][k] + c[1][k];
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        ClassMetrics { precision, recall, f1, support }
    });
    let mean = |f: fn(&ClassMetrics) -> f64| (f(&per_class[0]) + f(&per_class[1])) / 2.0;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
        }
    };
    EvalReport {
        confusion: *cm,
        per_class,
        accuracy: ratio(c[0][0] + c[1][1], total),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        balanced_accuracy: mean(|m| m.recall),
    }
}

pub fn evaluate(y_true: &[u8], y_pred: &[u8]) -> Result<EvalReport> {
    Ok(report(&confusion(y_true, y_pred)?))
}

pub fn balanced_accuracy(y_true: &[u8], y_pred: &[u8]) -> Result<f64> {
    Ok(evaluate(y_true, y_pred)?.balanced_accuracy)
}

impl EvalReport {
    /// Classification report and confusion matrix as aligned text.
    pub fn to_table(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "{:>14} {:>10} {:>10} {:>10} {:>10}", "", "precision", "recall", "f1-score", "support");
        let _ = writeln!(s);
        for (k, m) in self.per_class.iter().enumerate() {
            let _ = writeln!(s, "{:>14} {:>10.2} {:>10.2} {:>10.2} {:>10}", k, m.precision, m.recall, m.f1, m.support);
        }
        let total = self.confusion.total();
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>14} {:>10} {:>10} {:>10.2} {:>10}", "accuracy", "", "", self.accuracy, total);
        let _ = writeln!(
            s,
            "{:>14} {:>10.2} {:>10.2} {:>10.2} {:>10}",
            "macro avg", self.macro_precision, self.macro_recall, self.macro_f1, total
        );
        let _ = writeln!(
            s,
            "{:>14} {:>10.2} {:>10.2} {:>10.2} {:>10}",
            "weighted avg", self.weighted_precision, self.weighted_recall, self.weighted_f1, total
        );
        let _ = writeln!(s);
        let c = self.confusion.counts;
        let _ = writeln!(s, "{:>14} {:>8} {:>8}", "true\\pred", 0, 1);
        let _ = writeln!(s, "{:>14} {:>8} {:>8}", 0, c[0][0], c[0][1]);
        let _ = writeln!(s, "{:>14} {:>8} {:>8}", 1, c[1][0], c[1][1]);
        s
    }

    pub fn write_jsonl<W: Write>(&self, model: &str, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            model: &'a str,
            #[serde(flatten)]
            report: &'a EvalReport,
        }
        serde_json::to_writer(&mut out, &Line { model, report: self })?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn cohort(neg: usize, pos: usize) -> LabeledDataset {
        let n = neg + pos;
        let labels = (0..n).map(|i| (i >= neg) as u8).collect();
        LabeledDataset::from_parts(Array2::zeros((n, 1)), labels).unwrap()
    }

    #[test]
    fn split_gives_reference_counts() {
        let data = cohort(101, 423);
        let s = stratified_split(&data, 0.2, 42).unwrap();
        let (train, test) = s.apply(&data).unwrap();
        assert_eq!(train.class_counts(), [81, 338]);
        assert_eq!(test.class_counts(), [20, 85]);
    }

    #[test]
    fn split_small_and_deterministic() {
        let data = cohort(5, 5);
        let s = stratified_split(&data, 0.2, 1).unwrap();
        let (_, test) = s.apply(&data).unwrap();
        assert_eq!(test.class_counts(), [1, 1]);
        assert_eq!(s, stratified_split(&data, 0.2, 1).unwrap());
        assert_ne!(s, stratified_split(&data, 0.2, 2).unwrap());
    }

    #[test]
    fn split_rejects_degenerate_classes() {
        assert!(matches!(stratified_split(&cohort(1, 10), 0.2, 0), Err(Error::DegenerateClass(_))));
        assert!(matches!(stratified_split(&cohort(0, 10), 0.2, 0), Err(Error::DegenerateClass(_))));
    }

    #[test]
    fn kfold_is_balanced() {
        let labels: Vec<u8> = (0..50).map(|i| (i % 5 != 0) as u8).collect();
        let fold = stratified_kfold(&labels, 5, 3).unwrap();
        for f in 0..5 {
            let zeros = (0..50).filter(|&i| fold[i] == f && labels[i] == 0).count();
            let total = fold.iter().filter(|&&x| x == f).count();
            assert_eq!((zeros, total), (2, 10));
        }
        assert!(matches!(stratified_kfold(&labels, 20, 3), Err(Error::DegenerateFold(_))));
    }

    #[test]
    fn confusion_examples() {
        let y: Vec<u8> = std::iter::repeat_n(0, 20).chain(std::iter::repeat_n(1, 85)).collect();
        assert_eq!(confusion(&y, &y).unwrap().counts, [[20, 0], [0, 85]]);
        assert_eq!(confusion(&y, &[1; 105]).unwrap().counts, [[0, 20], [0, 85]]);
        assert!(matches!(confusion(&y, &[1; 3]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn report_matches_logistic_regression_figures() {
        let r = report(&ConfusionMatrix::new([[6, 14], [2, 83]]));
        assert!((r.accuracy - 0.8476).abs() < 1e-4);
        assert!((r.per_class[0].precision - 0.75).abs() < 1e-12);
        assert!((r.per_class[0].recall - 0.30).abs() < 1e-12);
        assert!((r.per_class[0].f1 - 0.4286).abs() < 1e-4);
        assert!((r.per_class[1].precision - 0.8557).abs() < 1e-4);
        assert!((r.per_class[1].recall - 0.9765).abs() < 1e-4);
        assert!((r.per_class[1].f1 - 0.9121).abs() < 1e-4);
    }

    #[test]
    fn report_naive_bayes_and_balanced_accuracy() {
        let r = report(&ConfusionMatrix::new([[20, 0], [74, 11]]));
        assert!((r.accuracy - 0.2952).abs() < 1e-4);
        assert!((r.per_class[0].precision - 0.2128).abs() < 1e-4);
        assert_eq!(r.per_class[0].recall, 1.0);
        assert!((r.per_class[0].f1 - 0.3509).abs() < 1e-4);
        assert!((r.per_class[1].recall - 0.1294).abs() < 1e-4);

        let r = report(&ConfusionMatrix::new([[9, 11], [5, 80]]));
        assert!((r.balanced_accuracy - (9.0 / 20.0 + 80.0 / 85.0) / 2.0).abs() < 1e-12);
        assert!((r.balanced_accuracy - 0.6956).abs() < 1e-4);
    }

    #[test]
    fn zero_denominators_are_zero() {
        let r = report(&ConfusionMatrix::new([[0, 20], [0, 85]]));
        assert_eq!(r.per_class[0].precision, 0.0);
        assert_eq!(r.per_class[0].f1, 0.0);
        assert_eq!(r.balanced_accuracy, 0.5);
    }

    #[test]
    fn macro_and_weighted_by_hand() {
        // F1 = 2TP / (2TP + FP + FN).
        let r = report(&ConfusionMatrix::new([[9, 11], [5, 80]]));
        let f0 = 18.0 / 34.0;
        let f1 = 160.0 / 176.0;
        assert!((r.per_class[0].f1 - f0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - f1).abs() < 1e-12);
        assert!((r.macro_f1 - (f0 + f1) / 2.0).abs() < 1e-12);
        assert!((r.weighted_f1 - (20.0 * f0 + 85.0 * f1) / 105.0).abs() < 1e-12);
    }

    #[test]
    fn table_layout() {
        let t = report(&ConfusionMatrix::new([[6, 14], [2, 83]])).to_table("LR");
        assert!(t.contains("precision"));
        assert!(t.contains("weighted avg"));
        assert!(t.lines().any(|l| l.trim_start().starts_with("0       0.75       0.30       0.43")));
    }
}
