//! Report arithmetic, split sizes and outcome labeling.

use crs_core::eval::{report, stratified_split, ConfusionMatrix};
use crs_core::schema::label_outcome;
use crs_core::LabeledDataset;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

/// Reference report: confusion counts `[[tn, fp], [fn, tp]]`, accuracy, then
/// precision/recall/F1 for class 0 and class 1. `None` marks a number the
/// reference table leaves out.
type Printed = (&'static str, [[usize; 2]; 2], f64, [Option<f64>; 3], [Option<f64>; 3]);

const PRINTED: [Printed; 6] = [
    ("logistic", [[6, 14], [2, 83]], 0.85, [Some(0.75), Some(0.30), Some(0.43)], [Some(0.86), Some(0.98), Some(0.91)]),
    ("svm", [[2, 18], [4, 81]], 0.79, [None, Some(0.10), Some(0.15)], [Some(0.82), Some(0.95), Some(0.88)]),
    ("naive_bayes", [[20, 0], [74, 11]], 0.30, [Some(0.21), Some(1.00), Some(0.35)], [None, Some(0.13), Some(0.23)]),
    ("mlp", [[9, 11], [5, 80]], 0.85, [None, Some(0.45), Some(0.53)], [Some(0.88), Some(0.94), Some(0.91)]),
    ("forest", [[5, 15], [4, 81]], 0.82, [None, Some(0.25), Some(0.34)], [Some(0.84), Some(0.95), Some(0.90)]),
    ("boost", [[5, 15], [3, 82]], 0.83, [Some(0.62), Some(0.25), Some(0.36)], [Some(0.85), Some(0.96), Some(0.90)]),
];

pub fn reference_metrics() -> Outcome {
    let mut compared = 0;
    for (name, counts, acc, c0, c1) in PRINTED {
        let r = report(&ConfusionMatrix::new(counts));
        let [[tn, fp], [fn_, tp]] = counts.map(|row| row.map(|v| v as f64));
        // Independent count formulas.
        let direct = [
            [tn / (tn + fn_), tn / (tn + fp), 2.0 * tn / (2.0 * tn + fp + fn_)],
            [tp / (tp + fp), tp / (tp + fn_), 2.0 * tp / (2.0 * tp + fp + fn_)],
        ];
        ensure!((r.accuracy - (tn + tp) / 105.0).abs() < 1e-12, "{name}: accuracy formula");
        ensure!((r.accuracy - acc).abs() <= 0.005 + 1e-12, "{name}: accuracy {:.4} vs printed {acc}", r.accuracy);
        compared += 1;
        for (class, printed) in [(0, c0), (1, c1)] {
            let m = r.per_class[class];
            let got = [m.precision, m.recall, m.f1];
            for k in 0..3 {
                ensure!((got[k] - direct[class][k]).abs() < 1e-12, "{name}: class {class} metric {k} formula");
                if let Some(w) = printed[k] {
                    ensure!((got[k] - w).abs() <= 0.005 + 1e-12, "{name}: class {class} metric {k} {:.4} vs printed {w}", got[k]);
                    compared += 1;
                }
            }
        }
    }
    Ok(format!("{compared} printed values across 6 matrices within 0.005"))
}

pub fn split_exactness() -> Outcome {
    let mut y = vec![1u8; 423];
    y.extend([0u8; 101]);
    let x = Array2::from_shape_fn((524, 1), |(i, _)| i as f64);
    let data = LabeledDataset::from_parts(x, y)?;
    for seed in 0..10 {
        let (train, test) = stratified_split(&data, 0.2, seed)?.apply(&data)?;
        ensure!(train.class_counts() == [81, 338], "seed {seed}: train {:?}", train.class_counts());
        ensure!(test.class_counts() == [20, 85], "seed {seed}: test {:?}", test.class_counts());
    }
    Ok("train 338/81, test 85/20 on 10 seeds".into())
}

pub fn mcid_labeling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8_9);
    for i in 0..10_000 {
        // Half the pairs on the tenth-point grid, where the comparison is
        // exact in integers; the rest anywhere in range.
        let (b, s, want) = if i % 2 == 0 {
            let (bt, st) = (rng.random_range(0..=1100i64), rng.random_range(0..=1100i64));
            (bt as f64 / 10.0, st as f64 / 10.0, bt - st >= 89)
        } else {
            let (b, s) = (rng.random_range(0.0..=110.0), rng.random_range(0.0..=110.0));
            if ((b - s) - 8.9f64).abs() < 1e-6 {
                continue;
            }
            (b, s, b - s > 8.9)
        };
        let got = label_outcome(b, Some(s))?.value == 1;
        ensure!(got == want, "baseline {b}, six-month {s}: label {}", got as u8);
    }
    for (b, s, want) in [(8.9, 0.0, 1), (50.0, 41.1, 1), (50.0, 41.2, 0), (110.0, 101.1, 1), (18.0, 9.0, 1), (17.0, 9.0, 0)] {
        let got = label_outcome(b, Some(s))?.value;
        ensure!(got == want, "boundary pair ({b}, {s}) labeled {got}");
    }
    Ok("10,000 pairs, boundary 8.9 inclusive".into())
}
