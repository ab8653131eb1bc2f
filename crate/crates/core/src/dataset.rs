use std::collections::HashSet;
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::format_number;

pub const OUTCOME_COLUMN: &str = "OUTCOME";
pub const DELTA_COLUMN: &str = "SNOT22_DELTA";

/// Encoded feature matrix with binary outcomes.
///
/// `deltas` holds the baseline minus six-month SNOT-22 difference the label
/// was derived from; it is the target column and never a predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub categorical: Vec<bool>,
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
    pub deltas: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(
        ids: Vec<String>,
        feature_names: Vec<String>,
        categorical: Vec<bool>,
        features: Array2<f64>,
        labels: Vec<u8>,
        deltas: Vec<f64>,
    ) -> Result<Self> {
        let n = features.nrows();
        for len in [ids.len(), labels.len(), deltas.len()] {
            if len != n {
                return Err(Error::LengthMismatch { left: n, right: len });
            }
        }
        if feature_names.len() != features.ncols() || categorical.len() != features.ncols() {
            return Err(Error::DimensionMismatch { expected: features.ncols(), got: feature_names.len() });
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::SchemaMismatch("labels must be 0 or 1".into()));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(LabeledDataset { ids, feature_names, categorical, features, labels, deltas })
    }

    /// Builds a dataset without outcome deltas, for models and tests that only
    /// need labels. Deltas are set to ±MCID so the labels stay consistent.
    pub fn from_parts(features: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        let n = features.nrows();
        let d = features.ncols();
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        let names = (0..d).map(|j| format!("x{j}")).collect();
        let deltas = labels.iter().map(|&y| if y == 1 { 10.0 } else { 0.0 }).collect();
        LabeledDataset::new(ids, names, vec![false; d], features, labels, deltas)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// `(rows, predictors + target)`, the conventional table shape.
    pub fn shape(&self) -> (usize, usize) {
        (self.len(), self.n_features() + 1)
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&y| y == 1).count();
        [self.len() - ones, ones]
    }

    pub fn prevalence(&self) -> f64 {
        self.class_counts()[1] as f64 / self.len().max(1) as f64
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        LabeledDataset {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            categorical: self.categorical.clone(),
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            deltas: rows.iter().map(|&i| self.deltas[i]).collect(),
        }
    }

    pub fn subset_by_ids(&self, ids: &[String]) -> Result<LabeledDataset> {
        let rows = ids
            .iter()
            .map(|id| self.ids.iter().position(|x| x == id).ok_or_else(|| Error::SchemaMismatch(format!("unknown id {id}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.subset(&rows))
    }

    /// Writes `CASE_ID,<features...>,SNOT22_DELTA,OUTCOME`.
    pub fn write_csv<W: Write>(&self, id_column: &str, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![id_column.to_string()];
        header.extend(self.feature_names.iter().cloned());
        header.push(DELTA_COLUMN.into());
        header.push(OUTCOME_COLUMN.into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.ids[i].clone()];
            rec.extend(self.features.row(i).iter().map(|&v| format_number(v)));
            rec.push(format_number(self.deltas[i]));
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file produced by [`LabeledDataset::write_csv`]. Categorical
    /// flags are taken from `categorical_names`.
    pub fn read_csv<R: Read>(input: R, categorical_names: &[String]) -> Result<LabeledDataset> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.len() < 3
            || header[header.len() - 1] != OUTCOME_COLUMN
            || header[header.len() - 2] != DELTA_COLUMN
        {
            return Err(Error::SchemaMismatch("expected id, features, SNOT22_DELTA, OUTCOME columns".into()));
        }
        let names: Vec<String> = header[1..header.len() - 2].to_vec();
        let d = names.len();
        let mut ids = Vec::new();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut deltas = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            ids.push(rec[0].to_string());
            for j in 0..d {
                values.push(parse_num(&rec[j + 1], &names[j])?);
            }
            deltas.push(parse_num(&rec[d + 1], DELTA_COLUMN)?);
            let y = parse_num(&rec[d + 2], OUTCOME_COLUMN)?;
            if y != 0.0 && y != 1.0 {
                return Err(Error::SchemaMismatch(format!("outcome {y} is not binary")));
            }
            labels.push(y as u8);
        }
        let features = Array2::from_shape_vec((ids.len(), d), values)
            .map_err(|e| Error::SchemaMismatch(e.to_string()))?;
        let categorical = names.iter().map(|n| categorical_names.contains(n)).collect();
        LabeledDataset::new(ids, names, categorical, features, labels, deltas)
    }
}

fn parse_num(text: &str, column: &str) -> Result<f64> {
    text.trim()
        .parse::<f64>()
        .map_err(|_| Error::SchemaMismatch(format!("non-numeric value {text:?} in column {column}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_round_trip() {
        let ds = LabeledDataset::new(
            vec!["a".into(), "b".into()],
            vec!["AGE".into(), "SEX".into()],
            vec![false, true],
            array![[41.5, 0.0], [63.0, 1.0]],
            vec![1, 0],
            vec![12.0, -3.0],
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv("CASE_ID", &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("CASE_ID,AGE,SEX,SNOT22_DELTA,OUTCOME\n"));
        let back = LabeledDataset::read_csv(&buf[..], &["SEX".to_string()]).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.shape(), (2, 3));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let err = LabeledDataset::new(
            vec!["a".into(), "a".into()],
            vec!["x".into()],
            vec![false],
            array![[1.0], [2.0]],
            vec![0, 1],
            vec![0.0, 10.0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateId(_)));
    }
}
