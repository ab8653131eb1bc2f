//! `crs` subcommands. Every successful run writes `manifests/<command>.json`
//! listing the seed, config hash and the artifacts it produced.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use crs_core::bench::{
    class_ratio_check, latest_labels, panel_calls, rater_report, rater_table, stratify_by_uncertainty, tier_accuracy,
    ExpertLabel, RaterCalls,
};
use crs_core::ensemble::{adaboost_fit, stack_fit, AdaBoostConfig, SoftWeights, VotePanel};
use crs_core::eval::{evaluate, stratified_split, EvalReport};
use crs_core::explain::{correlation_matrix, matrix_to_csv, pca, permutation_importance_all, shap_values, stratified_background};
use crs_core::ingest::{clean_cohort, generate_synthetic, RawCohort};
use crs_core::pipeline::{evaluate_model, require_both_classes, train_roster, tune_roster, vote_predictions, TuningReport};
use crs_core::{Classifier, FittedModel, LabeledDataset, ModelKind, ModelSpec};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Result, ServeError};
use crate::http::{serve, AppState};
use crate::store::{labels_from_csv, labels_to_csv, LabelStore, EVENTS_FILE};
use crate::workspace::Workspace;

#[derive(Debug, Parser)]
#[command(name = "crs", version, about = "CRS surgical-outcome modeling, benchmarking and serving")]
pub struct Cli {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub port: Option<u16>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic raw cohort.
    Synth {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Clean a raw cohort into cohort.csv.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Stratified train/test split of cohort.csv.
    Split,
    /// Tune on the training split and fit one roster member, or `all`.
    Train { model: String },
    /// Score fitted models on the test split or on `--input`.
    Evaluate {
        #[arg(default_value = "all")]
        model: String,
        /// Cleaned dataset in cohort.csv format to score instead of the test split.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Hard vote, soft vote, stacking and AdaBoost on the test split.
    Ensemble,
    #[command(subcommand)]
    Explain(ExplainCommand),
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Run the HTTP service.
    Serve,
}

#[derive(Debug, Subcommand)]
pub enum ExplainCommand {
    /// Permutation importance on the test split.
    Perm {
        #[arg(long)]
        model: Option<String>,
    },
    /// Shapley attributions for test cases.
    Shap {
        #[arg(long)]
        model: Option<String>,
        /// Explain only the first N test cases.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Principal components of the cohort features.
    Pca {
        /// Skip standardization.
        #[arg(long)]
        raw: bool,
    },
    /// Pearson correlation matrix of the cohort features.
    Corr,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Pick hard, medium and easy test cases by model uncertainty.
    Stratify {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score expert labels per tier and per rater.
    Report {
        /// Label table `rater,case_id,call,confidence,timestamp,revision`;
        /// the service's label store when omitted.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Effective config: file or defaults, then command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(p) = cli.port {
        cfg.serve.port = p;
    }
    cfg.finalize()
}

struct Run<'a> {
    cfg: &'a Config,
    ws: Workspace,
    written: Vec<PathBuf>,
}

impl Run<'_> {
    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        self.ws.write(&path, bytes)?;
        if !self.written.contains(&path) {
            self.written.push(path);
        }
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(self.ws.path(rel), &bytes)
    }

    fn manifest(&self, command: &str) -> Result<Manifest> {
        let artifacts = self
            .written
            .iter()
            .map(|p| Ok(ArtifactEntry { path: self.ws.relative(p), sha256: hex::encode(Sha256::digest(std::fs::read(p)?)) }))
            .collect::<Result<Vec<_>>>()?;
        let m = Manifest { command: command.to_string(), seed: self.cfg.seed, config_hash: self.cfg.hash(), artifacts };
        let mut bytes = serde_json::to_vec_pretty(&m)?;
        bytes.push(b'\n');
        self.ws.write(&self.ws.path(&format!("manifests/{}.json", command.replace(' ', "-"))), &bytes)?;
        Ok(m)
    }
}

/// Process entry point: parses arguments, runs, and on failure prints the
/// error record to stderr and exits with status 2.
pub fn main() {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("{}", serde_json::to_string(&e.record()).expect("error record serializes"));
        std::process::exit(2);
    }
}

pub fn run(cli: Cli) -> Result<Manifest> {
    let cfg = resolve_config(&cli)?;
    let mut r = Run { cfg: &cfg, ws: Workspace::new(&cfg.data_dir), written: Vec::new() };
    let name = match &cli.command {
        Command::Synth { output } => synth(&mut r, output.as_deref())?,
        Command::Ingest { input } => ingest(&mut r, input.as_deref())?,
        Command::Split => split(&mut r)?,
        Command::Train { model } => train(&mut r, model)?,
        Command::Evaluate { model, input } => evaluate_cmd(&mut r, model, input.as_deref())?,
        Command::Ensemble => ensemble(&mut r)?,
        Command::Explain(e) => explain(&mut r, e)?,
        Command::Bench(BenchCommand::Stratify { model, k }) => bench_stratify(&mut r, model.as_deref(), *k)?,
        Command::Bench(BenchCommand::Report { labels }) => bench_report(&mut r, labels.as_deref())?,
        Command::Serve => {
            let m = r.manifest("serve")?;
            serve_cmd(&cfg, &r.ws)?;
            return Ok(m);
        }
    };
    r.manifest(name)
}

fn synth(r: &mut Run, output: Option<&Path>) -> Result<&'static str> {
    let schema = r.cfg.schema()?;
    let raw = generate_synthetic(&r.cfg.synthetic_spec(), &schema)?;
    let mut buf = Vec::new();
    raw.write_csv(&mut buf)?;
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| r.ws.synthetic_csv());
    r.write(path.clone(), &buf)?;
    println!("wrote {} rows to {}", raw.rows.len(), path.display());
    Ok("synth")
}

fn ingest(r: &mut Run, input: Option<&Path>) -> Result<&'static str> {
    let schema = r.cfg.schema()?;
    let path = input.map(Path::to_path_buf).unwrap_or_else(|| r.ws.synthetic_csv());
    let file = File::open(&path).map_err(|_| ServeError::MissingArtifact(path.display().to_string()))?;
    let provenance = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let raw = RawCohort::read_csv(BufReader::new(file), &provenance)?;
    let (data, report) = clean_cohort(&raw, &schema, &r.cfg.clean)?;
    let mut buf = Vec::new();
    data.write_csv(&schema.columns.id, &mut buf)?;
    r.write(r.ws.cohort_csv(), &buf)?;
    let mut rep = Vec::new();
    report.write_jsonl(&mut rep)?;
    r.write(r.ws.path("clean_report.jsonl"), &rep)?;
    let [n0, n1] = data.class_counts();
    println!("kept {} of {} rows ({n1} success, {n0} failure)", data.len(), raw.rows.len());
    Ok("ingest")
}

fn split(r: &mut Run) -> Result<&'static str> {
    let schema = r.cfg.schema()?;
    let data = r.ws.load_cohort(&schema)?;
    let s = stratified_split(&data, r.cfg.pipeline.test_fraction, r.cfg.seed)?;
    r.write_json("split.json", &s)?;
    println!("train {} / test {}", s.train_ids.len(), s.test_ids.len());
    Ok("split")
}

fn load_specs(ws: &Workspace) -> Result<BTreeMap<String, ModelSpec>> {
    let p = ws.path("models/specs.json");
    if !p.exists() {
        return Ok(BTreeMap::new());
    }
    Ok(serde_json::from_reader(BufReader::new(File::open(p)?))?)
}

fn train(r: &mut Run, which: &str) -> Result<&'static str> {
    let schema = r.cfg.schema()?;
    let (train, _) = r.ws.load_train_test(&schema)?;
    let mut pcfg = r.cfg.pipeline.clone();
    if which != "all" {
        let kind = ModelKind::parse(which)?;
        pcfg.roster.retain(|s| s.kind() == kind);
        if pcfg.roster.is_empty() {
            pcfg.roster.push(ModelSpec::default_for(kind));
        }
    }
    let (specs, tuning) = tune_roster(&train, &pcfg)?;
    let models = train_roster(&train, &specs)?;
    let mut all_specs = load_specs(&r.ws)?;
    for (m, s) in models.iter().zip(&specs) {
        let mut buf = Vec::new();
        m.write(&mut buf)?;
        r.write(r.ws.model_path(&m.name), &buf)?;
        all_specs.insert(m.name.clone(), s.clone());
        println!("trained {}", m.name);
    }
    r.write_json("models/specs.json", &all_specs)?;
    let tpath = r.ws.path("models/tuning.json");
    let mut merged: TuningReport =
        if tpath.exists() { serde_json::from_reader(BufReader::new(File::open(&tpath)?))? } else { TuningReport::default() };
    if tuning.lr_lambda.is_some() {
        merged.lr_lambda = tuning.lr_lambda;
        merged.lr_scores = tuning.lr_scores;
    }
    if tuning.mlp_sweep.is_some() {
        merged.mlp_sweep = tuning.mlp_sweep;
    }
    r.write_json("models/tuning.json", &merged)?;
    Ok("train")
}

fn report_line(name: &str, report: &EvalReport) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    report.write_jsonl(name, &mut buf)?;
    Ok(buf)
}

fn evaluate_cmd(r: &mut Run, which: &str, input: Option<&Path>) -> Result<&'static str> {
    let schema = r.cfg.schema()?;
    let (data, dir) = match input {
        Some(p) => {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
            (r.ws.read_dataset(p, &schema)?, format!("reports/{stem}"))
        }
        None => (r.ws.load_train_test(&schema)?.1, "reports".to_string()),
    };
    require_both_classes(&data.labels)?;
    let models = if which == "all" { r.ws.load_models()? } else { vec![r.ws.load_model(which)?] };
    if models.is_empty() {
        return Err(ServeError::MissingArtifact("models/*.model".into()));
    }
    let mut text = String::new();
    let mut lines = Vec::new();
    for m in &models {
        let report = evaluate_model(m, &data)?;
        let line = report_line(&m.name, &report)?;
        r.write(r.ws.path(&format!("{dir}/{}.jsonl", m.name)), &line)?;
        lines.extend(line);
        text += &report.to_table(&m.name);
        text.push('\n');
    }
    if which == "all" {
        r.write(r.ws.path(&format!("{dir}/evaluation.jsonl")), &lines)?;
        r.write(r.ws.path(&format!("{dir}/evaluation.txt")), text.as_bytes())?;
    }
    print!("{text}");
    Ok("evaluate")
}

fn ensemble(r: &mut Run) -> Result<&'static str> {
    let schema = r.cfg.schema()?;
    let (train, test) = r.ws.load_train_test(&schema)?;
    require_both_classes(&test.labels)?;
    let models = r.ws.load_models()?;
    if models.is_empty() {
        return Err(ServeError::MissingArtifact("models/*.model".into()));
    }
    let specs = load_specs(&r.ws)?;
    let named: Vec<(String, ModelSpec)> = models
        .iter()
        .map(|m| (m.name.clone(), specs.get(&m.name).cloned().unwrap_or_else(|| ModelSpec::default_for(m.kind()))))
        .collect();
    let panel = VotePanel::from_models(models, &r.cfg.pipeline.tie_break)?;
    let y = &test.labels;
    let rows = || test.features.rows().into_iter();

    let hard = evaluate(y, &vote_predictions(&panel, &test)?)?;
    let weights = SoftWeights::uniform(panel.names().len())?;
    let soft_pred = rows().map(|x| panel.soft_vote(x, &weights).map(|(c, _)| c)).collect::<crs_core::Result<Vec<u8>>>()?;
    let soft = evaluate(y, &soft_pred)?;
    let x = train.features.view();
    let stack = stack_fit(x, &train.labels, &train.categorical, &named, r.cfg.pipeline.tune_folds, r.cfg.seed)?;
    let stacked = evaluate(y, &rows().map(|x| stack.predict(x)).collect::<crs_core::Result<Vec<u8>>>()?)?;
    let ada = adaboost_fit(x, &train.labels, &AdaBoostConfig::default())?;
    let boosted = evaluate(y, &rows().map(|x| ada.predict(x)).collect::<crs_core::Result<Vec<u8>>>()?)?;

    let mut lines = Vec::new();
    let mut text = String::new();
    for (name, rep) in [("hard_vote", &hard), ("soft_vote", &soft), ("stacking", &stacked), ("adaboost", &boosted)] {
        lines.extend(report_line(name, rep)?);
        text += &rep.to_table(name);
        text.push('\n');
    }
    r.write(r.ws.path("reports/ensemble.jsonl"), &lines)?;
    r.write(r.ws.path("reports/ensemble.txt"), text.as_bytes())?;
    print!("{text}");
    Ok("ensemble")
}

fn explain(r: &mut Run, cmd: &ExplainCommand) -> Result<&'static str> {
    let schema = r.cfg.schema()?;
    let e = &r.cfg.explain;
    match cmd {
        ExplainCommand::Perm { model } => {
            let name = model.as_deref().unwrap_or(&e.model);
            let m = r.ws.load_model(name)?;
            let (_, test) = r.ws.load_train_test(&schema)?;
            let imp = permutation_importance_all(&m, test.features.view(), &test.labels, &test.feature_names, e.repeats, r.cfg.seed)?;
            let csv = imp.to_csv();
            r.write(r.ws.path(&format!("explain/perm_{name}.csv")), csv.as_bytes())?;
            print!("{csv}");
            Ok("explain perm")
        }
        ExplainCommand::Shap { model, limit } => {
            let name = model.as_deref().unwrap_or(&e.model).to_string();
            let m = r.ws.load_model(&name)?;
            let (train, test) = r.ws.load_train_test(&schema)?;
            let bg = train.features.select(Axis(0), &stratified_background(&train.labels, e.background, r.cfg.seed));
            let n = limit.unwrap_or(test.len()).min(test.len());
            let (csv, global) = shap_tables(&m, &test, &bg, n, e.shap_budget, r.cfg.seed)?;
            r.write(r.ws.path(&format!("explain/shap_{name}.csv")), csv.as_bytes())?;
            r.write(r.ws.path(&format!("explain/shap_{name}_global.csv")), global.as_bytes())?;
            print!("{global}");
            Ok("explain shap")
        }
        ExplainCommand::Pca { raw } => {
            let data = r.ws.load_cohort(&schema)?;
            let p = pca(data.features.view(), !raw)?;
            r.write(r.ws.path("explain/pca.csv"), p.to_csv().as_bytes())?;
            println!("{} components reach 90% of the variance", p.components_for(0.9));
            Ok("explain pca")
        }
        ExplainCommand::Corr => {
            let data = r.ws.load_cohort(&schema)?;
            let c = correlation_matrix(data.features.view());
            r.write(r.ws.path("explain/corr.csv"), matrix_to_csv(&data.feature_names, c.view()).as_bytes())?;
            println!("wrote {0}x{0} correlation matrix", data.n_features());
            Ok("explain corr")
        }
    }
}

/// Per-case attributions and the mean |phi| ranking over those cases.
fn shap_tables(
    m: &FittedModel,
    data: &LabeledDataset,
    bg: &ndarray::Array2<f64>,
    n: usize,
    budget: usize,
    seed: u64,
) -> Result<(String, String)> {
    let d = data.n_features();
    let mut csv = format!("case_id,base_value,output,{}\n", data.feature_names.join(","));
    let mut mean_abs = vec![0.0; d];
    for i in 0..n {
        let s = shap_values(m, data.row(i), bg.view(), budget, seed)?;
        let phis: Vec<String> = s.phi.iter().map(|v| v.to_string()).collect();
        csv += &format!("{},{},{},{}\n", data.ids[i], s.base_value, s.fx, phis.join(","));
        for j in 0..d {
            mean_abs[j] += s.phi[j].abs() / n.max(1) as f64;
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| mean_abs[b].total_cmp(&mean_abs[a]).then(a.cmp(&b)));
    let mut global = String::from("feature,mean_abs_phi\n");
    for j in order {
        global += &format!("{},{}\n", data.feature_names[j], mean_abs[j]);
    }
    Ok((csv, global))
}

fn bench_stratify(r: &mut Run, model: Option<&str>, k: Option<usize>) -> Result<&'static str> {
    let schema = r.cfg.schema()?;
    let name = model.unwrap_or(&r.cfg.bench.model);
    let m = r.ws.load_model(name)?;
    let (_, test) = r.ws.load_train_test(&schema)?;
    let probs = m.predict_proba_batch(test.features.view())?;
    let by_id: BTreeMap<String, f64> = test.ids.iter().cloned().zip(probs).collect();
    let subset = stratify_by_uncertainty(&by_id, k.unwrap_or(r.cfg.bench.k))?;
    let truth: BTreeMap<String, u8> = test.ids.iter().cloned().zip(test.labels.iter().copied()).collect();
    let ratio = class_ratio_check(&subset, &truth)?;
    r.write(r.ws.path("bench/subset.csv"), subset.to_csv().as_bytes())?;
    r.write_json("bench/subset.json", &subset)?;
    r.write_json("bench/class_ratio.json", &ratio)?;
    println!(
        "{} cases; subset prevalence {:.3} vs test {:.3}{}",
        subset.cases.len(),
        ratio.subset_prevalence,
        ratio.source_prevalence,
        if ratio.flagged { " (flagged: more than 10 points apart)" } else { "" }
    );
    Ok("bench stratify")
}

fn stored_labels(ws: &Workspace) -> Result<Vec<ExpertLabel>> {
    if !ws.labels_dir().join(EVENTS_FILE).exists() {
        return Ok(Vec::new());
    }
    Ok(LabelStore::replay_from_empty(&ws.labels_dir())?.labels)
}

fn bench_report(r: &mut Run, labels: Option<&Path>) -> Result<&'static str> {
    let schema = r.cfg.schema()?;
    let subset = r.ws.load_subset()?.ok_or_else(|| ServeError::MissingArtifact("bench/subset.json".into()))?;
    let (_, test) = r.ws.load_train_test(&schema)?;
    let truth: BTreeMap<String, u8> = test.ids.iter().cloned().zip(test.labels.iter().copied()).collect();
    let events = match labels {
        Some(p) => labels_from_csv(BufReader::new(File::open(p).map_err(|_| ServeError::MissingArtifact(p.display().to_string()))?))?,
        None => stored_labels(&r.ws)?,
    };
    let in_subset: BTreeSet<&str> = subset.cases.iter().map(|c| c.case_id.as_str()).collect();
    let latest = latest_labels(events.iter().filter(|l| in_subset.contains(l.case_id.as_str())));
    if latest.is_empty() {
        return Err(ServeError::Core(crs_core::Error::TooFewCases { needed: 1, got: 0 }));
    }
    let mut calls: RaterCalls = BTreeMap::new();
    for ((rater, case), l) in &latest {
        calls.entry(rater.clone()).or_default().insert(case.clone(), l.call);
    }
    let raters: Vec<String> = calls.keys().cloned().collect();
    let panel = panel_calls(&latest, &raters)?;
    let tiers = tier_accuracy(&calls, &truth, &subset)?;

    let mut extra: RaterCalls = BTreeMap::new();
    extra.insert("panel".into(), panel.iter().map(|(c, d)| (c.clone(), d.decision)).collect());
    let model_name = &r.cfg.bench.model;
    if let Ok(m) = r.ws.load_model(model_name) {
        let sub = test.subset_by_ids(&subset.cases.iter().map(|c| c.case_id.clone()).collect::<Vec<_>>())?;
        let pred = m.predict_batch(sub.features.view())?;
        extra.insert(format!("model:{model_name}"), sub.ids.iter().cloned().zip(pred).collect());
    }
    let extra_tiers = tier_accuracy(&extra, &truth, &subset)?;

    let mut tier_csv = String::from("rater,hard,medium,easy\n");
    for (name, a) in tiers.per_rater.iter().chain([("pooled".to_string(), tiers.pooled)].iter().map(|(n, a)| (n, a))) {
        tier_csv += &format!("{name},{},{},{}\n", a[0], a[1], a[2]);
    }
    for (name, a) in &extra_tiers.per_rater {
        tier_csv += &format!("{name},{},{},{}\n", a[0], a[1], a[2]);
    }
    let mut all_calls = calls.clone();
    all_calls.extend(extra);
    let table = rater_table(&rater_report(&all_calls, &truth)?);
    let mut panel_csv = String::from("case_id,votes_0,votes_1,confidence_0,confidence_1,decision,method\n");
    for d in panel.values() {
        let method = serde_json::to_value(d.method)?;
        panel_csv += &format!(
            "{},{},{},{},{},{},{}\n",
            d.case_id, d.votes[0], d.votes[1], d.confidence[0], d.confidence[1], d.decision, method.as_str().unwrap_or("")
        );
    }
    let export: Vec<ExpertLabel> = latest.values().cloned().collect();
    r.write(r.ws.path("bench/tiers.csv"), tier_csv.as_bytes())?;
    r.write(r.ws.path("bench/raters.txt"), table.as_bytes())?;
    r.write(r.ws.path("bench/panel.csv"), panel_csv.as_bytes())?;
    r.write(r.ws.path("bench/labels.csv"), labels_to_csv(&export)?.as_bytes())?;
    print!("{tier_csv}\n{table}");
    Ok("bench report")
}

fn serve_cmd(cfg: &Config, ws: &Workspace) -> Result<()> {
    let state = AppState::load(cfg, ws)?;
    let ip = cfg.serve.bind.parse().map_err(|e| ServeError::Config(format!("bind address {}: {e}", cfg.serve.bind)))?;
    let addr = SocketAddr::new(ip, cfg.serve.port);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(serve(state, addr))
}
