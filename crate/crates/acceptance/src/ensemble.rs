//! Hard-vote tie rule and stacking leakage.

use std::collections::BTreeSet;
use std::sync::Arc;

use crs_core::ensemble::{out_of_fold, FitFn, Member, VotePanel, DEFAULT_TIE_BREAK};
use crs_core::Classifier;
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Failure, Outcome};

const ROSTER: [&str; 6] = ["logistic", "svm", "naive_bayes", "mlp", "forest", "boost"];

/// Posterior for row `i` read from column `member` of a table; the row
/// index travels in feature 0.
struct Scripted {
    table: Arc<Array2<f64>>,
    member: usize,
}

impl Classifier for Scripted {
    fn predict_proba(&self, row: ArrayView1<f64>) -> crs_core::Result<f64> {
        Ok(self.table[[row[0] as usize, self.member]])
    }
}

/// Scores 1.0 on exactly the rows it was trained on.
struct Witness(BTreeSet<usize>);

impl Classifier for Witness {
    fn predict_proba(&self, row: ArrayView1<f64>) -> crs_core::Result<f64> {
        Ok(self.0.contains(&(row[0] as usize)) as u8 as f64)
    }
}

fn witness_fit(x: ArrayView2<f64>, _y: &[u8]) -> crs_core::Result<Box<dyn Classifier>> {
    Ok(Box::new(Witness(x.column(0).iter().map(|&v| v as usize).collect())))
}

pub fn tie_rule_and_stacking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(333);
    let n = 1000;
    let mut table = Array2::zeros((n, 6));
    for i in 0..n {
        let mut votes = [0u8, 0, 0, 1, 1, 1];
        votes.shuffle(&mut rng);
        for m in 0..6 {
            table[[i, m]] = if votes[m] == 1 { rng.random_range(0.5..1.0) } else { rng.random_range(0.0..0.5) };
        }
    }
    let table = Arc::new(table);
    let members = (0..6).map(|m| Member::new(ROSTER[m], Scripted { table: table.clone(), member: m })).collect();
    let panel = VotePanel::new(members, DEFAULT_TIE_BREAK)?;
    let mlp = 3;
    let mut agree = 0;
    for i in 0..n {
        let row = ndarray::array![i as f64];
        let votes = panel.votes(row.view())?;
        ensure!(votes.iter().filter(|&&v| v == 1).count() == 3, "row {i} is not a 3-3 tie");
        if panel.hard_vote(row.view())? == votes[mlp] {
            agree += 1;
        }
    }
    ensure!(agree == n, "hard vote followed the MLP on {agree} of {n} ties");

    let fit: &FitFn = &witness_fit;
    let mut assignments = 0;
    for k in 2..=6usize {
        for seed in 0..12u64 {
            let rows = 10 * k + seed as usize;
            let x = Array2::from_shape_fn((rows, 1), |(i, _)| i as f64);
            let y: Vec<u8> = (0..rows).map(|i| ((i * 7 + seed as usize) % 3 == 0) as u8).collect();
            let oof = out_of_fold(x.view(), &y, &[fit, fit], k, seed)?;
            oof.audit().map_err(|e| Failure(format!("k={k} seed={seed}: {e}")))?;
            ensure!(oof.features.iter().all(|&v| v == 0.0), "k={k} seed={seed}: a row was scored by a model that saw it");
            assignments += 1;
        }
    }
    Ok(format!("{agree}/{n} ties follow the MLP; {assignments} fold assignments leak-free"))
}
