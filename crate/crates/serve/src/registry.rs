//! Immutable fitted models, the active-model manifest and the decision
//! threshold, plus conversion of JSON patient records into model rows.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use crs_core::explain::PermImportance;
use crs_core::schema::{validate_record, FeatureKind, PatientRecord, Violation};
use crs_core::{Classifier, FittedModel, Schema};
use ndarray::{Array1, Array2, ArrayView1};
use serde_json::Value;

use crate::config::check_threshold;
use crate::error::{Result, ServeError};

pub const ENSEMBLE: &str = "ensemble";

/// Mean posterior of every member.
pub struct MeanPanel(pub Vec<Arc<FittedModel>>);

impl Classifier for MeanPanel {
    fn predict_proba(&self, row: ArrayView1<f64>) -> crs_core::Result<f64> {
        let mut total = 0.0;
        for m in &self.0 {
            total += m.predict_proba(row)?;
        }
        Ok(total / self.0.len() as f64)
    }
}

pub type SharedClassifier = Arc<dyn Classifier + Send + Sync>;

pub struct ModelRegistry {
    pub schema: Schema,
    models: BTreeMap<String, Arc<FittedModel>>,
    active: Option<(String, SharedClassifier)>,
    threshold: RwLock<f64>,
    /// Training rows used as the Shapley background.
    pub background: Option<Array2<f64>>,
    pub importance: Option<PermImportance>,
}

impl ModelRegistry {
    /// `active` names a loaded model or [`ENSEMBLE`]; anything else leaves
    /// the registry without an active model.
    pub fn new(schema: Schema, models: Vec<FittedModel>, active: &str, threshold: f64) -> Result<ModelRegistry> {
        check_threshold(threshold)?;
        let models: BTreeMap<String, Arc<FittedModel>> =
            models.into_iter().map(|m| (m.name.clone(), Arc::new(m))).collect();
        let active: Option<(String, SharedClassifier)> = if active == ENSEMBLE && !models.is_empty() {
            Some((ENSEMBLE.to_string(), Arc::new(MeanPanel(models.values().cloned().collect()))))
        } else {
            models.get(active).map(|m| (active.to_string(), m.clone() as SharedClassifier))
        };
        Ok(ModelRegistry { schema, models, active, threshold: RwLock::new(threshold), background: None, importance: None })
    }

    pub fn model_names(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }

    pub fn active(&self) -> Result<(&str, &SharedClassifier)> {
        self.active.as_ref().map(|(n, m)| (n.as_str(), m)).ok_or(ServeError::NoActiveModel)
    }

    pub fn threshold(&self) -> f64 {
        *self.threshold.read().expect("threshold lock")
    }

    pub fn set_threshold(&self, t: f64) -> Result<()> {
        check_threshold(t)?;
        *self.threshold.write().expect("threshold lock") = t;
        Ok(())
    }

    pub fn probability(&self, row: ArrayView1<f64>) -> Result<(String, f64)> {
        let (name, model) = self.active()?;
        Ok((name.to_string(), model.predict_proba(row)?))
    }
}

/// Per-request thresholds may sit on the upper boundary.
pub fn check_request_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(ServeError::InvalidThreshold(t, "(0, 1]"))
    }
}

pub fn decide(probability: f64, threshold: f64) -> u8 {
    (probability >= threshold) as u8
}

/// Converts JSON fields into encoded values. Categorical fields accept a
/// dictionary label or an integer code; continuous fields accept numbers or
/// numeric strings. Every problem is collected rather than the first.
pub fn encode_fields(fields: &BTreeMap<String, Value>, schema: &Schema) -> (BTreeMap<String, f64>, Vec<Violation>) {
    let mut values = BTreeMap::new();
    let mut problems = Vec::new();
    let mut bad = |feature: &str, message: String| problems.push(Violation { feature: feature.to_string(), message });
    for (name, v) in fields {
        let Some(spec) = schema.feature(name) else {
            bad(name, "not in schema".into());
            continue;
        };
        let encoded = match (v, &spec.kind) {
            (Value::Number(n), _) => n.as_f64(),
            (Value::String(s), FeatureKind::Categorical { .. }) => spec.encode(s).ok().map(f64::from),
            (Value::String(s), FeatureKind::Continuous { .. }) => s.trim().parse::<f64>().ok(),
            _ => None,
        };
        match encoded {
            Some(x) => {
                values.insert(name.clone(), x);
            }
            None => bad(name, format!("cannot read {v} as a {} value", if spec.is_categorical() { "categorical" } else { "numeric" })),
        }
    }
    (values, problems)
}

/// Validated model row in schema order.
pub fn record_row(fields: &BTreeMap<String, Value>, schema: &Schema) -> Result<Array1<f64>> {
    let (values, mut violations) = encode_fields(fields, schema);
    let record = PatientRecord { id: "request".into(), values, snot22_six_month: None };
    for v in validate_record(&record, schema).violations {
        if !violations.iter().any(|p| p.feature == v.feature) {
            violations.push(v);
        }
    }
    if !violations.is_empty() {
        violations.sort_by(|a, b| a.feature.cmp(&b.feature));
        return Err(ServeError::Validation(violations));
    }
    Ok(Array1::from(record.to_row(schema)?))
}

/// Encoded row back to display values: labels for categoricals.
pub fn decode_row(row: ArrayView1<f64>, schema: &Schema) -> BTreeMap<String, Value> {
    schema
        .features
        .iter()
        .zip(row.iter())
        .map(|(f, &v)| {
            let shown = match f.decode(v as u32) {
                Some(label) if f.is_categorical() => Value::String(label.to_string()),
                _ => serde_json::Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null),
            };
            (f.name.clone(), shown)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn full_record(schema: &Schema) -> BTreeMap<String, Value> {
        schema
            .features
            .iter()
            .map(|f| {
                let v = match &f.kind {
                    FeatureKind::Continuous { min, max } => json!((min + max) / 2.0),
                    FeatureKind::Categorical { labels } => json!(labels[0]),
                };
                (f.name.clone(), v)
            })
            .collect()
    }

    #[test]
    fn labels_and_codes_encode_the_same() {
        let schema = Schema::crs_default();
        let mut a = full_record(&schema);
        let r1 = record_row(&a, &schema).unwrap();
        a.insert("SEX".into(), json!(0));
        a.insert("AGE".into(), json!("54"));
        let r2 = record_row(&a, &schema).unwrap();
        assert_eq!(r1, r2);
        let back = decode_row(r1.view(), &schema);
        assert_eq!(record_row(&back, &schema).unwrap(), r1);
    }

    #[test]
    fn every_violation_is_listed() {
        let schema = Schema::crs_default();
        let mut a = full_record(&schema);
        a.insert("SNOT22_BLN_TOTAL".into(), json!(140));
        a.insert("SEX".into(), json!("Unknown"));
        a.insert("HEIGHT".into(), json!(180));
        a.remove("AGE");
        let Err(ServeError::Validation(v)) = record_row(&a, &schema) else { panic!("expected validation failure") };
        let names: Vec<&str> = v.iter().map(|x| x.feature.as_str()).collect();
        assert_eq!(names, ["AGE", "HEIGHT", "SEX", "SNOT22_BLN_TOTAL"]);
    }

    #[test]
    fn threshold_rules() {
        assert_eq!(decide(0.5, 0.5), 1);
        assert_eq!(decide(0.999, 1.0), 0);
        assert_eq!(decide(1.0, 1.0), 1);
        assert!(check_request_threshold(1.0).is_ok());
        assert!(check_request_threshold(0.0).is_err());
        assert!(check_request_threshold(f64::NAN).is_err());
    }
}
