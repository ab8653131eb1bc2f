//! Clinical data model: feature specifications, categorical dictionaries and
//! the MCID outcome rule.
//!
//! The schema is loaded from a declarative TOML file (see `docs/schema.md`).
//! The checked-in default lives at `schema/crs_schema.toml` and is embedded
//! into the binary so every component agrees on codes.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimal clinically important difference on the SNOT-22 total, in points.
pub const MCID: f64 = 8.9;

/// SNOT-22 totals live in this closed interval.
pub const SNOT22_RANGE: (f64, f64) = (0.0, 110.0);

/// Slack used when comparing a score difference against the MCID, so that a
/// decimal boundary such as `30 - 21.1` is not lost to binary rounding.
const MCID_EPS: f64 = 1e-9;

const DEFAULT_SCHEMA: &str = include_str!("../../../schema/crs_schema.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous { min: f64, max: f64 },
    Categorical { labels: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

/// Trim and case-fold a raw label before dictionary lookup.
pub fn normalize_label(text: &str) -> String {
    text.trim().to_lowercase()
}

impl FeatureSpec {
    pub fn continuous(name: &str, min: f64, max: f64) -> Self {
        FeatureSpec { name: name.to_string(), kind: FeatureKind::Continuous { min, max } }
    }

    pub fn categorical(name: &str, labels: &[&str]) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Categorical { labels: labels.iter().map(|s| s.to_string()).collect() },
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical { .. })
    }

    /// Number of categories, or `None` for continuous features.
    pub fn cardinality(&self) -> Option<usize> {
        match &self.kind {
            FeatureKind::Categorical { labels } => Some(labels.len()),
            FeatureKind::Continuous { .. } => None,
        }
    }

    /// The ordered `(label, code)` dictionary. Empty for continuous features.
    pub fn encoding(&self) -> Vec<(&str, u32)> {
        match &self.kind {
            FeatureKind::Categorical { labels } => {
                labels.iter().enumerate().map(|(i, l)| (l.as_str(), i as u32)).collect()
            }
            FeatureKind::Continuous { .. } => Vec::new(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<u32> {
        let FeatureKind::Categorical { labels } = &self.kind else {
            return Err(Error::NotCategorical(self.name.clone()));
        };
        let wanted = normalize_label(text);
        labels
            .iter()
            .position(|l| normalize_label(l) == wanted)
            .map(|i| i as u32)
            .ok_or_else(|| Error::UnknownLabel { feature: self.name.clone(), label: text.to_string() })
    }

    pub fn decode(&self, code: u32) -> Option<&str> {
        match &self.kind {
            FeatureKind::Categorical { labels } => labels.get(code as usize).map(String::as_str),
            FeatureKind::Continuous { .. } => None,
        }
    }

    /// Checks one encoded value; `None` means the value conforms.
    pub fn check_value(&self, value: f64) -> Option<String> {
        if !value.is_finite() {
            return Some("value is not finite".to_string());
        }
        match &self.kind {
            FeatureKind::Continuous { min, max } => {
                (value < *min || value > *max).then(|| format!("out of range [{min},{max}]"))
            }
            FeatureKind::Categorical { labels } => {
                let ok = value >= 0.0 && value.fract() == 0.0 && (value as usize) < labels.len();
                (!ok).then(|| "code not in dictionary".to_string())
            }
        }
    }

    /// Parses a raw text cell into its encoded numeric value.
    pub fn parse_cell(&self, text: &str) -> Result<f64> {
        match &self.kind {
            FeatureKind::Categorical { .. } => self.encode(text).map(f64::from),
            FeatureKind::Continuous { .. } => text.trim().parse::<f64>().map_err(|_| Error::UnknownLabel {
                feature: self.name.clone(),
                label: text.to_string(),
            }),
        }
    }

    /// Inverse of [`FeatureSpec::parse_cell`] for writing raw files.
    pub fn format_value(&self, value: f64) -> String {
        match self.decode(value as u32) {
            Some(label) if self.is_categorical() => label.to_string(),
            _ => format_number(value),
        }
    }
}

pub(crate) fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Encode `text_label` with the dictionary of `spec`.
pub fn encode_categorical(spec: &FeatureSpec, text_label: &str) -> Result<u32> {
    spec.encode(text_label)
}

/// Raw column names that are not predictors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub id: String,
    pub treatment: String,
    pub surgery_value: String,
    pub baseline: String,
    pub follow_up: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schema {
    pub version: u32,
    pub outcome_threshold: f64,
    pub columns: ColumnNames,
    pub features: Vec<FeatureSpec>,
}

#[derive(Deserialize)]
struct SchemaFile {
    version: u32,
    outcome_threshold: f64,
    columns: ColumnNames,
    feature: Vec<FeatureEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureEntry {
    name: String,
    kind: String,
    range: Option<[f64; 2]>,
    labels: Option<Vec<String>>,
}

impl Schema {
    /// The checked-in CRS schema.
    pub fn crs_default() -> Schema {
        Schema::from_toml(DEFAULT_SCHEMA).expect("embedded schema is valid")
    }

    pub fn load(path: &Path) -> Result<Schema> {
        Schema::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml(text: &str) -> Result<Schema> {
        let file: SchemaFile = toml::from_str(text).map_err(|e| Error::InvalidSchema(e.to_string()))?;
        let mut features = Vec::with_capacity(file.feature.len());
        for entry in file.feature {
            let kind = match entry.kind.as_str() {
                "continuous" => {
                    let [min, max] = entry
                        .range
                        .ok_or_else(|| Error::InvalidSchema(format!("{}: continuous needs range", entry.name)))?;
                    FeatureKind::Continuous { min, max }
                }
                "categorical" => FeatureKind::Categorical {
                    labels: entry
                        .labels
                        .ok_or_else(|| Error::InvalidSchema(format!("{}: categorical needs labels", entry.name)))?,
                },
                other => return Err(Error::InvalidSchema(format!("{}: unknown kind {other}", entry.name))),
            };
            features.push(FeatureSpec { name: entry.name, kind });
        }
        let schema = Schema {
            version: file.version,
            outcome_threshold: file.outcome_threshold,
            columns: file.columns,
            features,
        };
        schema.check()?;
        Ok(schema)
    }

    fn check(&self) -> Result<()> {
        let mut names = HashSet::new();
        for f in &self.features {
            if !names.insert(f.name.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate feature {}", f.name)));
            }
            match &f.kind {
                FeatureKind::Continuous { min, max } => {
                    if !(min < max) {
                        return Err(Error::InvalidSchema(format!("{}: empty range", f.name)));
                    }
                }
                FeatureKind::Categorical { labels } => {
                    if labels.len() < 2 {
                        return Err(Error::InvalidSchema(format!("{}: needs at least two labels", f.name)));
                    }
                    let mut seen = HashSet::new();
                    for l in labels {
                        if !seen.insert(normalize_label(l)) {
                            return Err(Error::InvalidSchema(format!("{}: duplicate label {l}", f.name)));
                        }
                    }
                }
            }
        }
        match self.feature(&self.columns.baseline) {
            Some(FeatureSpec { kind: FeatureKind::Continuous { min, max }, .. })
                if *min == SNOT22_RANGE.0 && *max == SNOT22_RANGE.1 => {}
            _ => {
                return Err(Error::InvalidSchema(format!(
                    "baseline column {} must be continuous on [0,110]",
                    self.columns.baseline
                )))
            }
        }
        Ok(())
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    /// Indices of categorical features, in schema order.
    pub fn categorical_mask(&self) -> Vec<bool> {
        self.features.iter().map(FeatureSpec::is_categorical).collect()
    }

    /// Removes the named features. The baseline score is always kept since
    /// the outcome is built from it.
    pub fn without(&self, dropped: &[String]) -> Schema {
        let mut s = self.clone();
        s.features.retain(|f| !dropped.contains(&f.name) || f.name == self.columns.baseline);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// Encoded predictor values keyed by feature name.
    pub values: BTreeMap<String, f64>,
    #[serde(default)]
    pub snot22_six_month: Option<f64>,
}

impl PatientRecord {
    pub fn snot22_baseline(&self, schema: &Schema) -> Option<f64> {
        self.values.get(&schema.columns.baseline).copied()
    }

    /// Encoded values in schema order.
    pub fn to_row(&self, schema: &Schema) -> Result<Vec<f64>> {
        schema
            .features
            .iter()
            .map(|f| self.values.get(&f.name).copied().ok_or_else(|| Error::UnknownFeature(f.name.clone())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub feature: String,
    pub message: String,
}

/// Every field problem found in one record; empty means the record is valid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_record(record: &PatientRecord, schema: &Schema) -> Verdict {
    let mut violations = Vec::new();
    for spec in &schema.features {
        match record.values.get(&spec.name) {
            None => violations.push(Violation { feature: spec.name.clone(), message: "missing".into() }),
            Some(&v) => {
                if let Some(message) = spec.check_value(v) {
                    violations.push(Violation { feature: spec.name.clone(), message });
                }
            }
        }
    }
    for name in record.values.keys() {
        if schema.feature(name).is_none() {
            violations.push(Violation { feature: name.clone(), message: "not in schema".into() });
        }
    }
    if let Some(v) = record.snot22_six_month {
        if !(SNOT22_RANGE.0..=SNOT22_RANGE.1).contains(&v) {
            violations.push(Violation {
                feature: schema.columns.follow_up.clone(),
                message: "out of range [0,110]".into(),
            });
        }
    }
    Verdict { violations }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeLabel {
    pub value: u8,
    /// Baseline minus six-month score; positive means improvement.
    pub delta: f64,
}

pub fn label_outcome(baseline: f64, six_month: Option<f64>) -> Result<OutcomeLabel> {
    let six_month = six_month.ok_or(Error::MissingFollowUp)?;
    for s in [baseline, six_month] {
        if !(SNOT22_RANGE.0..=SNOT22_RANGE.1).contains(&s) {
            return Err(Error::ScoreOutOfRange(s));
        }
    }
    let delta = baseline - six_month;
    Ok(OutcomeLabel { value: meets_mcid(delta) as u8, delta })
}

/// The labeling threshold on a score difference.
pub fn meets_mcid(delta: f64) -> bool {
    delta + MCID_EPS >= MCID
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::crs_default()
    }

    #[test]
    fn reference_dictionary_entries() {
        let s = schema();
        let sex = s.feature("SEX").unwrap();
        assert_eq!(encode_categorical(sex, "Female").unwrap(), 0);
        assert_eq!(encode_categorical(sex, "Male").unwrap(), 1);
        assert_eq!(encode_categorical(sex, "female ").unwrap(), 0);
        let ins = s.feature("INSURANCE").unwrap();
        assert_eq!(encode_categorical(ins, "Employer provided").unwrap(), 0);
        assert_eq!(encode_categorical(ins, "Medicare").unwrap(), 1);
        assert_eq!(encode_categorical(ins, "Private").unwrap(), 2);
        assert_eq!(encode_categorical(ins, "Canadian Medicare").unwrap(), 3);
        assert_eq!(encode_categorical(ins, "Medicaid").unwrap(), 4);
    }

    #[test]
    fn unknown_label_is_an_error() {
        let s = schema();
        let err = encode_categorical(s.feature("SEX").unwrap(), "Unknown").unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { ref feature, .. } if feature == "SEX"));
        assert!(matches!(
            encode_categorical(s.feature("AGE").unwrap(), "x"),
            Err(Error::NotCategorical(_))
        ));
    }

    #[test]
    fn comorbidity_none_is_code_zero() {
        let s = schema();
        for name in ["DIABETES", "COPD", "ASA_INTOLERANCE", "OSA_HISTORY", "GERD", "AFS", "ASTHMA", "FIBROMYALGIA"] {
            assert_eq!(s.feature(name).unwrap().encode("None").unwrap(), 0, "{name}");
        }
    }

    #[test]
    fn round_trip_every_dictionary_entry() {
        for spec in &schema().features {
            for (label, code) in spec.encoding() {
                assert_eq!(spec.encode(label).unwrap(), code);
                assert_eq!(spec.decode(code), Some(label));
            }
        }
    }

    #[test]
    fn schema_invariants() {
        let s = schema();
        assert_eq!(s.features.len(), 30);
        for f in &s.features {
            if let Some(n) = f.cardinality() {
                assert!(n >= 2);
                let codes: Vec<u32> = f.encoding().iter().map(|e| e.1).collect();
                assert_eq!(codes, (0..n as u32).collect::<Vec<_>>());
            }
        }
        let snot = s.feature("SNOT22_BLN_TOTAL").unwrap();
        assert_eq!(snot.kind, FeatureKind::Continuous { min: 0.0, max: 110.0 });
        for name in [
            "SNOT22_BLN_TOTAL", "AGE", "BLN_CT_TOTAL", "ALLERGY_TESTING", "PREVIOUS_SURGERY", "CRS_POLYPS",
            "SEPT_DEV", "HOUSEHOLD_INCOME", "INSURANCE", "SEX", "RACE", "ETHNICITY", "EDUCATION", "SMOKER",
            "ALCOHOL", "DIABETES", "COPD", "ASA_INTOLERANCE", "OSA_HISTORY", "GERD", "AFS", "ASTHMA",
            "FIBROMYALGIA", "BLN_ENDO_TOTAL",
        ] {
            assert_eq!(s.features.iter().filter(|f| f.name == name).count(), 1, "{name}");
        }
    }

    #[test]
    fn rejects_bad_schema_files() {
        let base = r#"
version = 1
outcome_threshold = 8.9
[columns]
id = "ID"
treatment = "T"
surgery_value = "Surgery"
baseline = "B"
follow_up = "F"
[[feature]]
name = "B"
kind = "continuous"
range = [0.0, 110.0]
"#;
        assert!(Schema::from_toml(base).is_ok());
        let one_label = format!("{base}\n[[feature]]\nname = \"X\"\nkind = \"categorical\"\nlabels = [\"a\"]\n");
        assert!(Schema::from_toml(&one_label).is_err());
        let dup = format!("{base}\n[[feature]]\nname = \"X\"\nkind = \"categorical\"\nlabels = [\"a\", \" A\"]\n");
        assert!(Schema::from_toml(&dup).is_err());
    }

    #[test]
    fn label_examples() {
        let l = label_outcome(52.0, Some(40.0)).unwrap();
        assert_eq!((l.value, l.delta), (1, 12.0));
        assert_eq!(label_outcome(30.0, Some(21.1)).unwrap().value, 1);
        let l = label_outcome(60.0, Some(55.0)).unwrap();
        assert_eq!((l.value, l.delta), (0, 5.0));
        assert!(matches!(label_outcome(60.0, None), Err(Error::MissingFollowUp)));
        assert!(matches!(label_outcome(111.0, Some(3.0)), Err(Error::ScoreOutOfRange(_))));
    }

    fn valid_record(s: &Schema) -> PatientRecord {
        let values = s
            .features
            .iter()
            .map(|f| {
                let v = match &f.kind {
                    FeatureKind::Continuous { min, max } => (min + max) / 2.0,
                    FeatureKind::Categorical { .. } => 1.0,
                };
                (f.name.clone(), v)
            })
            .collect();
        PatientRecord { id: "p1".into(), values, snot22_six_month: None }
    }

    #[test]
    fn validate_examples() {
        let s = schema();
        let mut r = valid_record(&s);
        assert!(validate_record(&r, &s).is_ok());

        r.values.insert("SNOT22_BLN_TOTAL".into(), 140.0);
        r.values.insert("SEX".into(), 7.0);
        let v = validate_record(&r, &s);
        assert_eq!(v.violations.len(), 2);
        assert!(v.violations.iter().any(|x| x.feature == "SNOT22_BLN_TOTAL" && x.message == "out of range [0,110]"));
        assert!(v.violations.iter().any(|x| x.feature == "SEX" && x.message == "code not in dictionary"));

        let mut r = valid_record(&s);
        r.values.remove("AGE");
        r.values.insert("BOGUS".into(), 1.0);
        assert_eq!(validate_record(&r, &s).violations.len(), 2);
    }
}
