//! Full training run on the checked-in cohort, and the benchmark protocol
//! on its test split.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::time::{Duration, Instant};

use crs_core::bench::{
    class_ratio_check, panel_decide, stratify_by_uncertainty, tier_accuracy, BenchmarkCase, BenchmarkSubset,
    DecisionMethod, ExpertLabel, RaterCalls, Tier,
};
use crs_core::ingest::{clean_cohort, default_drop_columns, CleanOptions, RawCohort};
use crs_core::pipeline::{run, PipelineConfig, RunOutcome};
use crs_core::Schema;

use crate::{ensure, Failure, Outcome};

pub const TIME_LIMIT: Duration = Duration::from_secs(300);

pub struct Timed {
    pub run: RunOutcome,
    pub elapsed: Duration,
    pub rows: usize,
    pub class_counts: [usize; 2],
}

/// Ingest, split, tune, fit and score with the default configuration.
pub fn desk_run(cohort_csv: &Path) -> Result<Timed, Failure> {
    let start = Instant::now();
    let schema = Schema::crs_default();
    let raw = RawCohort::read_csv(BufReader::new(File::open(cohort_csv)?), "synthetic_cohort.csv")?;
    let options = CleanOptions { drop_columns: default_drop_columns(), ..Default::default() };
    let (data, _) = clean_cohort(&raw, &schema, &options)?;
    let run = run(&data, &PipelineConfig::default())?;
    Ok(Timed { run, elapsed: start.elapsed(), rows: data.len(), class_counts: data.class_counts() })
}

pub fn check_end_to_end(t: &Timed) -> Outcome {
    ensure!(t.rows == 524 && t.class_counts == [101, 423], "cohort has {} rows, classes {:?}", t.rows, t.class_counts);
    ensure!(t.run.test.len() == 105, "test split has {} rows", t.run.test.len());
    ensure!(t.run.reports.len() == 6, "{} model reports", t.run.reports.len());
    let mlp = t.run.reports.iter().find(|(n, _)| n == "mlp").map(|(_, r)| r).ok_or_else(|| Failure("no MLP report".into()))?;
    let mut summary = Vec::new();
    for (name, r) in [("mlp", mlp), ("vote", &t.run.vote)] {
        let f1_0 = r.per_class[0].f1;
        summary.push(format!("{name} acc {:.3} F1_0 {f1_0:.3}", r.accuracy));
        ensure!(r.accuracy >= 0.85, "{name} accuracy {:.4} < 0.85", r.accuracy);
        ensure!(f1_0 >= 0.45, "{name} class-0 F1 {f1_0:.4} < 0.45");
    }
    ensure!(t.elapsed < TIME_LIMIT, "run took {:.0}s", t.elapsed.as_secs_f64());
    Ok(format!("{}; {:.1}s", summary.join(", "), t.elapsed.as_secs_f64()))
}

/// Tier invariants stated without reference to the selection code.
fn tier_invariants(p: &BTreeMap<String, f64>, s: &BenchmarkSubset) -> Result<(), Failure> {
    let k = s.k;
    let ids: BTreeSet<&str> = s.cases.iter().map(|c| c.case_id.as_str()).collect();
    ensure!(s.cases.len() == 3 * k && ids.len() == 3 * k, "subset has {} cases, {} distinct", s.cases.len(), ids.len());
    ensure!(ids.iter().all(|id| p.contains_key(*id)), "subset names an unknown case");
    let (hard, medium, easy) = (s.tier(Tier::Hard), s.tier(Tier::Medium), s.tier(Tier::Easy));
    ensure!(hard.len() == k && medium.len() == k && easy.len() == k, "tier sizes differ from k");
    let dist = |id: &str| (p[id] - 0.5).abs();
    let hard_max = hard.iter().map(|id| dist(id)).fold(0.0, f64::max);
    let easy_min = easy.iter().map(|id| dist(id)).fold(f64::INFINITY, f64::min);
    for id in p.keys() {
        ensure!(hard.contains(&id.as_str()) || dist(id) >= hard_max, "{id} is more uncertain than a hard case");
        ensure!(easy.contains(&id.as_str()) || dist(id) <= easy_min, "{id} is more certain than an easy case");
    }
    let mut rest: Vec<&String> = p.keys().filter(|id| !hard.contains(&id.as_str()) && !easy.contains(&id.as_str())).collect();
    rest.sort_by(|a, b| dist(a).total_cmp(&dist(b)).then(a.cmp(b)));
    let ranks: Vec<usize> = medium.iter().filter_map(|m| rest.iter().position(|r| r.as_str() == *m)).collect();
    ensure!(ranks.len() == k, "a medium case is also hard or easy");
    let (lo, hi) = (*ranks.iter().min().unwrap_or(&0), *ranks.iter().max().unwrap_or(&0));
    ensure!(hi - lo == k - 1, "medium cases are not contiguous by rank");
    ensure!(lo.abs_diff(rest.len() - 1 - hi) <= 1, "medium window off center");
    Ok(())
}

fn fixed_vectors() -> Result<[f64; 3], Failure> {
    let mut cases = Vec::new();
    for (prefix, tier) in [("h", Tier::Hard), ("m", Tier::Medium), ("e", Tier::Easy)] {
        for i in 0..10 {
            cases.push(BenchmarkCase { case_id: format!("{prefix}{i}"), tier, probability: 0.5 });
        }
    }
    let truth: BTreeMap<String, u8> = cases.iter().map(|c| (c.case_id.clone(), 1u8)).collect();
    let subset = BenchmarkSubset { cases, k: 10 };
    let calls_with = |correct: [usize; 3]| -> BTreeMap<String, u8> {
        let mut out = BTreeMap::new();
        for (t, prefix) in ["h", "m", "e"].iter().enumerate() {
            for i in 0..10 {
                out.insert(format!("{prefix}{i}"), (i < correct[t]) as u8);
            }
        }
        out
    };
    let single: RaterCalls = [("model".to_string(), calls_with([6, 8, 10]))].into();
    let t = tier_accuracy(&single, &truth, &subset)?;
    ensure!(t.per_rater["model"] == [0.6, 0.8, 1.0], "single-rater tiers {:?}", t.per_rater["model"]);

    // 33, 47 and 56 correct calls per tier over six raters.
    let per_rater = [[5, 8, 9], [6, 8, 10], [6, 7, 9], [5, 8, 9], [6, 8, 10], [5, 8, 9]];
    let calls: RaterCalls = per_rater.iter().enumerate().map(|(r, c)| (format!("doctor{}", r + 1), calls_with(*c))).collect();
    let t = tier_accuracy(&calls, &truth, &subset)?;
    for (i, want) in [0.55, 0.783, 0.933].into_iter().enumerate() {
        ensure!((t.pooled[i] - want).abs() < 5e-4, "pooled tier {i}: {:.4} vs {want}", t.pooled[i]);
    }
    Ok(t.pooled)
}

pub fn check_benchmark(t: &Timed) -> Outcome {
    let test = &t.run.test;
    let mlp = t.run.models.iter().find(|m| m.name == "mlp").ok_or_else(|| Failure("no MLP model".into()))?;
    let p: BTreeMap<String, f64> = test.ids.iter().cloned().zip(mlp.predict_proba_batch(test.features.view())?).collect();
    ensure!(p.len() == 105, "{} test cases", p.len());
    let subset = stratify_by_uncertainty(&p, 10)?;
    tier_invariants(&p, &subset)?;
    let truth: BTreeMap<String, u8> = test.ids.iter().cloned().zip(test.labels.iter().copied()).collect();
    let ratio = class_ratio_check(&subset, &truth)?;

    let label = |rater: &str, call: u8, confidence: u8| ExpertLabel {
        rater: rater.into(),
        case_id: "c".into(),
        call,
        confidence,
        timestamp: 0,
        revision: 1,
    };
    let split = [label("r1", 1, 5), label("r2", 1, 4), label("r3", 1, 3), label("r4", 0, 5), label("r5", 0, 5), label("r6", 0, 3)];
    let d = panel_decide("c", &split)?;
    ensure!(d.confidence == [13, 12], "confidence sums {:?}", d.confidence);
    ensure!(d.decision == 0 && d.method == DecisionMethod::ConfidenceTieBreak, "tie broken to {} by {:?}", d.decision, d.method);

    let pooled = fixed_vectors()?;
    Ok(format!(
        "30 cases, invariants hold (subset prevalence {:.2}); 12 vs 13 -> 0; pooled {:.3}/{:.3}/{:.3}",
        ratio.subset_prevalence, pooled[0], pooled[1], pooled[2]
    ))
}
