use std::path::PathBuf;

use crs_acceptance::end_to_end::{check_benchmark, check_end_to_end, desk_run};
use crs_acceptance::{durability, ensemble, metrics, optim, run, shapley, Failure, Verdict};

fn main() {
    let cohort = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic_cohort.csv");
    let bin = PathBuf::from(env!("CARGO_BIN_EXE_crs-node"));

    let mut verdicts: Vec<Verdict> = vec![
        run("reference_metrics", metrics::reference_metrics),
        run("split_exactness", metrics::split_exactness),
        run("mcid_labeling", metrics::mcid_labeling),
        run("gradient_fidelity", optim::gradient_fidelity),
        run("boosting_gain_oracle", optim::boosting_gain),
        run("svm_optimality", optim::svm_optimality),
        run("shapley_exactness", shapley::shapley_exactness),
        run("ensemble_tie_rule", ensemble::tie_rule_and_stacking),
    ];
    let desk = desk_run(&cohort);
    let shared = |f: fn(&crs_acceptance::end_to_end::Timed) -> crs_acceptance::Outcome| match &desk {
        Ok(t) => f(t),
        Err(e) => Err(Failure(format!("desk run failed: {e}"))),
    };
    verdicts.push(run("end_to_end_desk_run", || shared(check_end_to_end)));
    verdicts.push(run("benchmark_protocol", || shared(check_benchmark)));
    verdicts.push(run("service_durability", || durability::service_durability(&bin)));

    for v in &verdicts {
        println!("{}", v.line());
    }
    let failed = verdicts.iter().filter(|v| !v.passed()).count();
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
