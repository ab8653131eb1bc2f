//! Split, tune, train, evaluate and vote: the desk-scale run shared by the
//! command line and the acceptance suite.

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::ensemble::{VotePanel, DEFAULT_TIE_BREAK};
use crate::error::{Error, Result};
use crate::eval::{evaluate, stratified_kfold, stratified_split, EvalReport, SplitAssignment};
use crate::linear::LogisticConfig;
use crate::mlp::{width_sweep, SweepResult, DEFAULT_WIDTHS};
use crate::model::{FittedModel, ModelKind, ModelSpec, Preprocessor};

pub const DEFAULT_LAMBDAS: [f64; 6] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub test_fraction: f64,
    pub roster: Vec<ModelSpec>,
    /// Hidden widths tried by cross-validation; empty keeps the roster width.
    pub mlp_widths: Vec<usize>,
    /// Logistic penalties tried by cross-validation; empty keeps the roster value.
    pub lr_lambdas: Vec<f64>,
    pub tune_folds: usize,
    pub tie_break: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            test_fraction: 0.2,
            roster: ModelKind::ALL.iter().map(|&k| ModelSpec::default_for(k)).collect(),
            mlp_widths: DEFAULT_WIDTHS.to_vec(),
            lr_lambdas: DEFAULT_LAMBDAS.to_vec(),
            tune_folds: 5,
            tie_break: DEFAULT_TIE_BREAK.to_string(),
        }
    }
}

impl PipelineConfig {
    /// Roster with every seeded learner reseeded from the run seed.
    pub fn seeded_roster(&self) -> Vec<ModelSpec> {
        self.roster.iter().cloned().map(|s| s.with_seed(self.seed)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    pub log_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub lr_scores: Vec<LambdaScore>,
    pub lr_lambda: Option<f64>,
    pub mlp_sweep: Option<SweepResult>,
}

/// Picks the logistic penalty with the lowest pooled out-of-fold log loss;
/// ties go to the larger penalty.
pub fn tune_logistic_lambda(
    x: ArrayView2<f64>,
    y: &[u8],
    categorical: &[bool],
    base: &ModelSpec,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(f64, Vec<LambdaScore>)> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    let fold = stratified_kfold(y, folds, seed)?;
    let scores = grid
        .par_iter()
        .map(|&lambda| {
            let spec = with_lambda(base, lambda)?;
            let mut total = 0.0;
            for f in 0..folds {
                let (tr, te): (Vec<usize>, Vec<usize>) = (0..y.len()).partition(|&i| fold[i] != f);
                let ty: Vec<u8> = tr.iter().map(|&i| y[i]).collect();
                let m = spec.fit("cv", x.select(Axis(0), &tr).view(), &ty, categorical)?;
                for &i in &te {
                    let p = crate::Classifier::predict_proba(&m, x.row(i))?.clamp(1e-15, 1.0 - 1e-15);
                    total -= if y[i] == 1 { p.ln() } else { (1.0 - p).ln() };
                }
            }
            Ok(LambdaScore { lambda, log_loss: total / y.len() as f64 })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = scores
        .iter()
        .fold(None::<&LambdaScore>, |best, s| match best {
            Some(b) if b.log_loss < s.log_loss || (b.log_loss == s.log_loss && b.lambda >= s.lambda) => Some(b),
            _ => Some(s),
        })
        .expect("nonempty grid");
    Ok((best.lambda, scores))
}

fn with_lambda(spec: &ModelSpec, lambda: f64) -> Result<ModelSpec> {
    match spec {
        ModelSpec::Logistic { config, one_hot } => {
            Ok(ModelSpec::Logistic { config: LogisticConfig { lambda, ..config.clone() }, one_hot: *one_hot })
        }
        _ => Err(Error::InvalidConfig("lambda tuning applies to logistic regression only".into())),
    }
}

/// Cross-validated hidden width on the standardized training rows.
pub fn tune_mlp_width(
    x: ArrayView2<f64>,
    y: &[u8],
    categorical: &[bool],
    base: &ModelSpec,
    widths: &[usize],
    folds: usize,
) -> Result<(ModelSpec, SweepResult)> {
    let ModelSpec::Mlp { config, one_hot } = base else {
        return Err(Error::InvalidConfig("width tuning applies to the MLP only".into()));
    };
    let pre = Preprocessor::fit(x, categorical, true, *one_hot)?;
    let z = pre.transform(x)?;
    let sweep = width_sweep(z.view(), y, widths, folds, config)?;
    let mut config = config.clone();
    config.width = sweep.chosen_width;
    Ok((ModelSpec::Mlp { config, one_hot: *one_hot }, sweep))
}

/// Applies the configured grids to the roster using training rows only.
pub fn tune_roster(train: &LabeledDataset, cfg: &PipelineConfig) -> Result<(Vec<ModelSpec>, TuningReport)> {
    let x = train.features.view();
    let mut report = TuningReport::default();
    let mut specs = Vec::new();
    for spec in cfg.seeded_roster() {
        let tuned = match spec.kind() {
            ModelKind::Logistic if !cfg.lr_lambdas.is_empty() => {
                let (lambda, scores) =
                    tune_logistic_lambda(x, &train.labels, &train.categorical, &spec, &cfg.lr_lambdas, cfg.tune_folds, cfg.seed)?;
                report.lr_lambda = Some(lambda);
                report.lr_scores = scores;
                with_lambda(&spec, lambda)?
            }
            ModelKind::Mlp if !cfg.mlp_widths.is_empty() => {
                let (s, sweep) = tune_mlp_width(x, &train.labels, &train.categorical, &spec, &cfg.mlp_widths, cfg.tune_folds)?;
                report.mlp_sweep = Some(sweep);
                s
            }
            _ => spec,
        };
        specs.push(tuned);
    }
    Ok((specs, report))
}

/// Fits every spec on the full training split; members are named by kind.
pub fn train_roster(train: &LabeledDataset, specs: &[ModelSpec]) -> Result<Vec<FittedModel>> {
    specs
        .par_iter()
        .map(|s| s.fit(s.kind().as_str(), train.features.view(), &train.labels, &train.categorical))
        .collect()
}

/// Evaluation needs both outcomes among the true labels.
pub fn require_both_classes(labels: &[u8]) -> Result<()> {
    let ones = labels.iter().filter(|&&y| y == 1).count();
    if ones == 0 || ones == labels.len() {
        return Err(Error::DegenerateClass(format!("{} rows, {ones} positive", labels.len())));
    }
    Ok(())
}

pub fn evaluate_model(model: &FittedModel, data: &LabeledDataset) -> Result<EvalReport> {
    require_both_classes(&data.labels)?;
    evaluate(&data.labels, &model.predict_batch(data.features.view())?)
}

pub fn vote_predictions(panel: &VotePanel, data: &LabeledDataset) -> Result<Vec<u8>> {
    data.features.rows().into_iter().map(|r| panel.hard_vote(r)).collect()
}

#[derive(Debug)]
pub struct RunOutcome {
    pub split: SplitAssignment,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub tuning: TuningReport,
    pub models: Vec<FittedModel>,
    pub reports: Vec<(String, EvalReport)>,
    pub vote: EvalReport,
}

impl RunOutcome {
    pub fn report_for(&self, name: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

/// Split, tune on the training rows, fit the roster, and score every member
/// plus the hard-vote panel on the held-out rows.
pub fn run(data: &LabeledDataset, cfg: &PipelineConfig) -> Result<RunOutcome> {
    let split = stratified_split(data, cfg.test_fraction, cfg.seed)?;
    let (train, test) = split.apply(data)?;
    let (specs, tuning) = tune_roster(&train, cfg)?;
    let models = train_roster(&train, &specs)?;
    let reports = models
        .iter()
        .map(|m| Ok((m.name.clone(), evaluate_model(m, &test)?)))
        .collect::<Result<Vec<_>>>()?;
    let panel = VotePanel::from_models(models.clone(), &cfg.tie_break)?;
    let vote = evaluate(&test.labels, &vote_predictions(&panel, &test)?)?;
    Ok(RunOutcome { split, train, test, tuning, models, reports, vote })
}
