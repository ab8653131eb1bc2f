//! Raw cohort loading, the cleaning pipeline, cohort merging and synthetic
//! cohort generation.
//!
//! Cleaning drops rows in a fixed order: non-surgical treatment, missing
//! six-month follow-up, then any remaining null predictor. The six-month
//! score is consumed to build the outcome and never survives as a column.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::schema::{format_number, label_outcome, normalize_label, FeatureKind, Schema};

/// Text-valued cohort exactly as exported. Blank cells are nulls.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCohort {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub provenance: String,
}

impl RawCohort {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<String>>, provenance: &str) -> Result<Self> {
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != columns.len()) {
            return Err(Error::SchemaMismatch(format!(
                "row {i} has {} cells for {} columns",
                r.len(),
                columns.len()
            )));
        }
        Ok(RawCohort { columns, rows, provenance: provenance.to_string() })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn read_csv<R: Read>(input: R, provenance: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().flexible(false).from_reader(input);
        let columns = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        RawCohort::new(columns, rows, provenance)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    /// Rows with any null predictor are dropped.
    #[default]
    None,
    /// Median for continuous predictors, mode for categorical ones.
    MedianMode,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanOptions {
    pub drop_columns: Vec<String>,
    #[serde(default)]
    pub imputation: Imputation,
}

pub const REASON_NON_SURGERY: &str = "non_surgery";
pub const REASON_NO_FOLLOW_UP: &str = "no_follow_up";
pub const REASON_NULL_FIELD: &str = "null_field";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub provenance: String,
    pub rows_in: usize,
    pub rows_out: usize,
    pub dropped_by_reason: BTreeMap<String, usize>,
    pub dropped_columns: Vec<String>,
    /// Null cells per retained predictor among surgical rows.
    pub null_census: BTreeMap<String, usize>,
}

impl CleanReport {
    pub fn accounting_holds(&self) -> bool {
        self.rows_in == self.rows_out + self.dropped_by_reason.values().sum::<usize>()
    }

    /// One JSON record per line: the report itself.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

fn is_null(cell: &str) -> bool {
    cell.trim().is_empty()
}

pub fn default_drop_columns() -> Vec<String> {
    EXTRA_COLUMNS.iter().map(|s| s.to_string()).collect()
}

pub fn clean_cohort(raw: &RawCohort, schema: &Schema, options: &CleanOptions) -> Result<(LabeledDataset, CleanReport)> {
    let cols = &schema.columns;
    let kept = schema.without(&options.drop_columns);
    let find = |name: &str| raw.column(name).ok_or_else(|| Error::SchemaMismatch(format!("missing column {name}")));
    let id_col = find(&cols.id)?;
    let treat_col = find(&cols.treatment)?;
    let follow_col = find(&cols.follow_up)?;
    let feat_cols = kept.features.iter().map(|f| find(&f.name)).collect::<Result<Vec<_>>>()?;
    let baseline_idx = kept.index_of(&cols.baseline).expect("schema keeps the baseline column");

    let surgery = normalize_label(&cols.surgery_value);
    let surgical: Vec<&Vec<String>> = raw.rows.iter().filter(|r| normalize_label(&r[treat_col]) == surgery).collect();
    let non_surgery = raw.rows.len() - surgical.len();

    let mut null_census = BTreeMap::new();
    for (f, &c) in kept.features.iter().zip(&feat_cols) {
        null_census.insert(f.name.clone(), surgical.iter().filter(|r| is_null(&r[c])).count());
    }

    let followed: Vec<&Vec<String>> = surgical.iter().copied().filter(|r| !is_null(&r[follow_col])).collect();
    let no_follow_up = surgical.len() - followed.len();

    let mut rows: Vec<Vec<Option<f64>>> = Vec::with_capacity(followed.len());
    for r in &followed {
        let mut parsed = Vec::with_capacity(feat_cols.len());
        for (f, &c) in kept.features.iter().zip(&feat_cols) {
            if is_null(&r[c]) {
                parsed.push(None);
                continue;
            }
            let v = f.parse_cell(&r[c])?;
            if let Some(msg) = f.check_value(v) {
                return Err(Error::SchemaMismatch(format!("case {}: {} {msg}", r[id_col], f.name)));
            }
            parsed.push(Some(v));
        }
        rows.push(parsed);
    }

    let fills: Vec<Option<f64>> = match options.imputation {
        Imputation::None => vec![None; feat_cols.len()],
        Imputation::MedianMode => (0..feat_cols.len())
            .map(|j| {
                let observed: Vec<f64> = rows.iter().filter_map(|r| r[j]).collect();
                if kept.features[j].is_categorical() {
                    mode(&observed)
                } else {
                    median(&observed)
                }
            })
            .collect(),
    };

    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut deltas = Vec::new();
    let mut null_field = 0;
    for (raw_row, parsed) in followed.iter().zip(rows) {
        let filled: Option<Vec<f64>> = parsed.iter().zip(&fills).map(|(v, fill)| v.or(*fill)).collect();
        let Some(filled) = filled else {
            null_field += 1;
            continue;
        };
        let six = raw_row[follow_col].trim().parse::<f64>().map_err(|_| {
            Error::SchemaMismatch(format!("case {}: non-numeric {}", raw_row[id_col], cols.follow_up))
        })?;
        let label = label_outcome(filled[baseline_idx], Some(six))?;
        ids.push(raw_row[id_col].trim().to_string());
        values.extend(filled);
        labels.push(label.value);
        deltas.push(label.delta);
    }

    let features = Array2::from_shape_vec((ids.len(), feat_cols.len()), values)
        .map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    let dataset = LabeledDataset::new(ids, kept.feature_names(), kept.categorical_mask(), features, labels, deltas)?;

    let retained: HashSet<&str> = kept.features.iter().map(|f| f.name.as_str()).chain([cols.id.as_str()]).collect();
    let dropped_columns = raw.columns.iter().filter(|c| !retained.contains(c.as_str())).cloned().collect();
    let report = CleanReport {
        provenance: raw.provenance.clone(),
        rows_in: raw.rows.len(),
        rows_out: dataset.len(),
        dropped_by_reason: BTreeMap::from([
            (REASON_NON_SURGERY.to_string(), non_surgery),
            (REASON_NO_FOLLOW_UP.to_string(), no_follow_up),
            (REASON_NULL_FIELD.to_string(), null_field),
        ]),
        dropped_columns,
        null_census,
    };
    debug_assert!(report.accounting_holds());
    Ok((dataset, report))
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { (s[m - 1] + s[m]) / 2.0 })
}

fn mode(v: &[f64]) -> Option<f64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &x in v {
        *counts.entry(x as i64).or_default() += 1;
    }
    // Ties go to the smallest code.
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(k, _)| k as f64)
}

/// Re-exports a cleaned dataset in raw grammar: every row surgical, with the
/// six-month score reconstructed from the stored delta.
pub fn to_raw(dataset: &LabeledDataset, schema: &Schema) -> Result<RawCohort> {
    let cols = &schema.columns;
    let b = dataset
        .feature_index(&cols.baseline)
        .ok_or_else(|| Error::SchemaMismatch(format!("dataset lacks {}", cols.baseline)))?;
    let specs = dataset
        .feature_names
        .iter()
        .map(|n| schema.feature(n).ok_or_else(|| Error::UnknownFeature(n.clone())))
        .collect::<Result<Vec<_>>>()?;
    let mut columns = vec![cols.id.clone(), cols.treatment.clone()];
    columns.extend(dataset.feature_names.iter().cloned());
    columns.push(cols.follow_up.clone());
    let rows = (0..dataset.len())
        .map(|i| {
            let x = dataset.row(i);
            let mut r = vec![dataset.ids[i].clone(), cols.surgery_value.clone()];
            r.extend(specs.iter().zip(x.iter()).map(|(s, &v)| s.format_value(v)));
            r.push(format_number(x[b] - dataset.deltas[i]));
            r
        })
        .collect();
    RawCohort::new(columns, rows, "reexport")
}

pub fn merge_cohorts(a: &LabeledDataset, b: &LabeledDataset) -> Result<LabeledDataset> {
    if b.is_empty() && a.feature_names == b.feature_names {
        return Ok(a.clone());
    }
    if a.is_empty() && a.feature_names == b.feature_names {
        return Ok(b.clone());
    }
    if a.feature_names != b.feature_names || a.categorical != b.categorical {
        return Err(Error::SchemaMismatch("cohorts do not share a feature layout".into()));
    }
    let seen: HashSet<&str> = a.ids.iter().map(String::as_str).collect();
    if let Some(dup) = b.ids.iter().find(|id| seen.contains(id.as_str())) {
        return Err(Error::DuplicateId(dup.clone()));
    }
    let features = ndarray::concatenate(ndarray::Axis(0), &[a.features.view(), b.features.view()])
        .map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    LabeledDataset::new(
        a.ids.iter().chain(&b.ids).cloned().collect(),
        a.feature_names.clone(),
        a.categorical.clone(),
        features,
        a.labels.iter().chain(&b.labels).copied().collect(),
        a.deltas.iter().chain(&b.deltas).copied().collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub prevalence: f64,
    pub signal_strength: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The desk-scale stand-in for the combined surgical cohort.
    pub fn acceptance() -> Self {
        SyntheticSpec { n: 524, prevalence: 423.0 / 524.0, signal_strength: 1.0, seed: 7 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::InvalidConfig(format!("prevalence {} not in (0,1)", self.prevalence)));
        }
        if !(self.signal_strength >= 0.0) {
            return Err(Error::InvalidConfig("signal strength must be >= 0".into()));
        }
        Ok(())
    }

    pub fn positives(&self) -> usize {
        (self.n as f64 * self.prevalence).round() as usize
    }
}

/// Marginal distribution of a generated continuous predictor.
struct ContinuousShape {
    name: &'static str,
    mean: f64,
    sd: f64,
}

const CONTINUOUS_SHAPES: &[ContinuousShape] = &[
    ContinuousShape { name: "SNOT22_BLN_TOTAL", mean: 48.0, sd: 20.0 },
    ContinuousShape { name: "AGE", mean: 50.0, sd: 14.0 },
    ContinuousShape { name: "BLN_CT_TOTAL", mean: 12.0, sd: 5.5 },
    ContinuousShape { name: "BLN_ENDO_TOTAL", mean: 7.0, sd: 3.5 },
];

/// Coefficients of the planted logistic signal, applied to standardized
/// continuous values and centered binary codes.
pub const PLANTED_SIGNAL: &[(&str, f64)] = &[
    ("SNOT22_BLN_TOTAL", 5.2),
    ("BLN_CT_TOTAL", 2.2),
    ("AGE", -1.2),
    ("BLN_ENDO_TOTAL", 1.0),
    ("ALLERGY_TESTING", 1.0),
    ("PREVIOUS_SURGERY", -0.8),
    ("CRS_POLYPS", 0.6),
];

fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let normal = Normal::new(mean, sd).expect("positive sd");
    loop {
        let v = normal.sample(rng).round();
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
}

/// Generates an all-surgical, fully observed raw cohort whose outcome follows a
/// latent logistic model on [`PLANTED_SIGNAL`] scaled by `signal_strength`.
///
/// The `positives()` rows with the highest latent scores are class 1, so the
/// realized prevalence is exact. Scores are whole points.
pub fn generate_synthetic(spec: &SyntheticSpec, schema: &Schema) -> Result<RawCohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = schema.features.len();
    let mut x = vec![vec![0.0; d]; spec.n];
    let mut latent = vec![0.0; spec.n];
    for (i, row) in x.iter_mut().enumerate() {
        for (j, f) in schema.features.iter().enumerate() {
            row[j] = match &f.kind {
                FeatureKind::Continuous { min, max } => {
                    let shape = CONTINUOUS_SHAPES.iter().find(|s| s.name == f.name);
                    let (mean, sd) = shape.map_or(((min + max) / 2.0, (max - min) / 6.0), |s| (s.mean, s.sd));
                    truncated_normal(&mut rng, mean, sd, *min, *max)
                }
                FeatureKind::Categorical { labels } => rng.random_range(0..labels.len()) as f64,
            };
        }
        let mut score = 0.0;
        for &(name, beta) in PLANTED_SIGNAL {
            let Some(j) = schema.index_of(name) else { continue };
            let z = match &schema.features[j].kind {
                FeatureKind::Continuous { min, max } => {
                    let shape = CONTINUOUS_SHAPES.iter().find(|s| s.name == name);
                    let (mean, sd) = shape.map_or(((min + max) / 2.0, (max - min) / 6.0), |s| (s.mean, s.sd));
                    (row[j] - mean) / sd
                }
                FeatureKind::Categorical { labels } => 2.0 * row[j] / (labels.len() - 1) as f64 - 1.0,
            };
            score += beta * z;
        }
        let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
        latent[i] = spec.signal_strength * score + (u / (1.0 - u)).ln();
    }

    let mut order: Vec<usize> = (0..spec.n).collect();
    order.sort_by(|&a, &b| latent[b].total_cmp(&latent[a]).then(a.cmp(&b)));
    let mut label = vec![0u8; spec.n];
    for &i in order.iter().take(spec.positives()) {
        label[i] = 1;
    }

    let cols = &schema.columns;
    let b = schema.index_of(&cols.baseline).expect("schema has baseline");
    let mut columns = vec![cols.id.clone(), cols.treatment.clone()];
    columns.extend(schema.feature_names());
    columns.push(cols.follow_up.clone());
    let mut rows = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let baseline = if label[i] == 1 { x[i][b].max(9.0) } else { x[i][b] };
        x[i][b] = baseline;
        let delta = if label[i] == 1 {
            rng.random_range(9..=baseline as i64)
        } else {
            rng.random_range((baseline as i64 - 110).max(-15)..=(baseline as i64).min(8))
        };
        let mut r = vec![format!("S{:04}", i + 1), cols.surgery_value.clone()];
        r.extend(schema.features.iter().zip(&x[i]).map(|(f, &v)| f.format_value(v)));
        r.push(format_number(baseline - delta as f64));
        rows.push(r);
    }
    RawCohort::new(columns, rows, &format!("synthetic-seed{}", spec.seed))
}

/// Non-predictor attributes present in the raw exports and removed during
/// cleaning. Names are placeholders for the health-utility and
/// administrative fields of the source studies.
pub const EXTRA_COLUMNS: &[&str] = &[
    "HUV_BLN",
    "HUV_6MO",
    "SF6D_BLN",
    "SF6D_6MO",
    "ENROLL_DATE",
    "SITE",
    "SURGEON_ID",
    "CONSENT_VERSION",
    "BLN_VISIT_DATE",
    "FOLLOWUP_DATE",
    "RSDI_BLN",
    "PHQ2_BLN",
    "SMELL_TEST_BLN",
    "MEDICATION_NOTES",
    "IMAGING_NOTES",
    "REFERRAL_SOURCE",
    "STUDY_ARM",
];

/// Row and missingness profile of a source cohort, used to generate raw
/// files with the same cleaning arithmetic.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortProfile {
    pub name: &'static str,
    pub total_rows: usize,
    pub surgical_rows: usize,
    pub no_follow_up: usize,
    /// Null cells per predictor among surgical rows.
    pub null_census: Vec<(&'static str, usize)>,
    /// Followed-up surgical rows that carry at least one null.
    pub null_rows_after_follow_up: usize,
    pub extra_columns: usize,
    pub id_prefix: &'static str,
}

impl CohortProfile {
    /// 791 rows, 50 attributes; 604 surgical; 217 without follow-up.
    pub fn r2r01() -> Self {
        CohortProfile {
            name: "2R01",
            total_rows: 791,
            surgical_rows: 604,
            no_follow_up: 217,
            null_census: vec![
                ("AGE", 1),
                ("RACE", 1),
                ("EDUCATION", 10),
                ("HOUSEHOLD_INCOME", 7),
                ("SMOKER", 4),
                ("ALCOHOL", 5),
                ("DIABETES", 1),
                ("BLN_CT_TOTAL", 2),
                ("BLN_ENDO_TOTAL", 3),
                ("SNOT22_BLN_TOTAL", 1),
            ],
            null_rows_after_follow_up: 16,
            extra_columns: 17,
            id_prefix: "A",
        }
    }

    /// 354 rows, 39 attributes; 266 surgical. The split of the 113 removed
    /// surgical rows between missing follow-up and nulls is not known.
    pub fn r3r01() -> Self {
        CohortProfile {
            name: "3R01",
            total_rows: 354,
            surgical_rows: 266,
            no_follow_up: 105,
            null_census: vec![
                ("RACE", 2),
                ("EDUCATION", 3),
                ("HOUSEHOLD_INCOME", 1),
                ("OSA_HISTORY", 3),
                ("ALCOHOL", 3),
                ("BLN_ENDO_TOTAL", 3),
                ("SNOT22_BLN_TOTAL", 3),
            ],
            null_rows_after_follow_up: 8,
            extra_columns: 6,
            id_prefix: "B",
        }
    }

    pub fn expected_clean_rows(&self) -> usize {
        self.surgical_rows - self.no_follow_up - self.null_rows_after_follow_up
    }
}

/// Builds a raw export shaped like `profile`: medical-treatment rows, missing
/// follow-ups and null cells placed so that the reference per-stage counts
/// come out of [`clean_cohort`].
pub fn generate_cohort_raw(profile: &CohortProfile, signal_strength: f64, seed: u64, schema: &Schema) -> Result<RawCohort> {
    let total_nulls: usize = profile.null_census.iter().map(|c| c.1).sum();
    if profile.surgical_rows > profile.total_rows
        || profile.no_follow_up + profile.null_rows_after_follow_up > profile.surgical_rows
        || total_nulls < profile.null_rows_after_follow_up
        || profile.extra_columns > EXTRA_COLUMNS.len()
    {
        return Err(Error::InvalidConfig(format!("inconsistent profile {}", profile.name)));
    }
    let spec = SyntheticSpec { n: profile.total_rows, prevalence: 0.8, signal_strength, seed };
    let base = generate_synthetic(&spec, schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);

    let treat = base.column(&schema.columns.treatment).expect("generated");
    let follow = base.column(&schema.columns.follow_up).expect("generated");
    let mut rows = base.rows;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng);
    let (medical, surgical) = order.split_at(profile.total_rows - profile.surgical_rows);
    let (lost, followed) = surgical.split_at(profile.no_follow_up);
    let carriers = &followed[..profile.null_rows_after_follow_up];
    for &i in medical {
        rows[i][treat] = "Medical".into();
    }
    for &i in lost {
        rows[i][follow] = String::new();
    }

    let mut cells: Vec<usize> = Vec::with_capacity(total_nulls);
    for (name, count) in &profile.null_census {
        let c = base.columns.iter().position(|c| c == name).ok_or_else(|| Error::UnknownFeature(name.to_string()))?;
        cells.extend(std::iter::repeat_n(c, *count));
    }
    cells.shuffle(&mut rng);
    let (carrier_cells, rest) = cells.split_at(carriers.len());
    for (&row, &col) in carriers.iter().zip(carrier_cells) {
        rows[row][col] = String::new();
    }
    // Leftover nulls land on distinct (row, column) slots among the rows that
    // are dropped for missing follow-up.
    let mut pool: Vec<usize> = lost.to_vec();
    for &col in rest {
        pool.shuffle(&mut rng);
        let row = pool
            .iter()
            .copied()
            .find(|&r| !is_null(&rows[r][col]))
            .ok_or_else(|| Error::InvalidConfig("not enough rows to place nulls".into()))?;
        rows[row][col] = String::new();
    }

    let mut columns = base.columns;
    for (k, name) in EXTRA_COLUMNS.iter().take(profile.extra_columns).enumerate() {
        columns.push(name.to_string());
        for (i, r) in rows.iter_mut().enumerate() {
            r.push(format!("{}{}", &name[..2], (i * 7 + k) % 13));
        }
    }
    for (i, r) in rows.iter_mut().enumerate() {
        r[0] = format!("{}{:04}", profile.id_prefix, i + 1);
    }
    RawCohort::new(columns, rows, profile.name)
}
