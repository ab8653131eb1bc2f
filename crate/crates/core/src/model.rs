//! Model roster, shared preprocessing, and the line-delimited model file.
//!
//! A model file is JSON lines: a header record
//! `{"format":"crs-model","version":1,"kind":...,"name":...}` followed by
//! one body record holding the fitted parameters.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::boost::{fit_boost, BoostConfig, BoostModel};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, ForestConfig, ForestModel};
use crate::linear::{fit_logistic, LogisticConfig, LogisticModel};
use crate::mlp::{fit_mlp, MlpConfig, MlpModel};
use crate::naive_bayes::{fit_naive_bayes, NaiveBayesModel};
use crate::svm::{fit_svm, SvmConfig, SvmModel};

pub const MODEL_FORMAT: &str = "crs-model";
pub const MODEL_VERSION: u32 = 1;

/// Anything that maps a raw feature row to `p(y = 1 | x)`.
pub trait Classifier: Send + Sync {
    fn predict_proba(&self, row: ArrayView1<f64>) -> Result<f64>;

    /// Class 1 iff the posterior is `>= 0.5`.
    fn predict(&self, row: ArrayView1<f64>) -> Result<u8> {
        Ok((self.predict_proba(row)? >= 0.5) as u8)
    }
}

impl<F> Classifier for F
where
    F: Fn(ArrayView1<f64>) -> f64 + Send + Sync,
{
    fn predict_proba(&self, row: ArrayView1<f64>) -> Result<f64> {
        Ok(self(row))
    }
}

/// Standardizes continuous columns with training statistics and optionally
/// expands coded columns to indicators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub categorical: Vec<bool>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Indicator count per coded column when one-hot is on.
    pub one_hot: Option<Vec<usize>>,
}

impl Preprocessor {
    pub fn identity(categorical: &[bool]) -> Self {
        let d = categorical.len();
        Preprocessor { categorical: categorical.to_vec(), mean: vec![0.0; d], scale: vec![1.0; d], one_hot: None }
    }

    pub fn fit(x: ArrayView2<f64>, categorical: &[bool], standardize: bool, one_hot: bool) -> Result<Self> {
        if categorical.len() != x.ncols() {
            return Err(Error::DimensionMismatch { expected: x.ncols(), got: categorical.len() });
        }
        let mut p = Self::identity(categorical);
        if standardize {
            for j in (0..x.ncols()).filter(|&j| !categorical[j]) {
                let col = x.column(j);
                let m = col.mean().unwrap_or(0.0);
                let sd = col.mapv(|v| (v - m).powi(2)).mean().unwrap_or(0.0).sqrt();
                p.mean[j] = m;
                p.scale[j] = if sd > 0.0 { sd } else { 1.0 };
            }
        }
        if one_hot {
            p.one_hot = Some(
                (0..x.ncols())
                    .map(|j| if categorical[j] { x.column(j).iter().fold(0.0f64, |a, &v| a.max(v)) as usize + 1 } else { 0 })
                    .collect(),
            );
        }
        Ok(p)
    }

    pub fn n_inputs(&self) -> usize {
        self.categorical.len()
    }

    pub fn n_outputs(&self) -> usize {
        match &self.one_hot {
            None => self.n_inputs(),
            Some(k) => k.iter().zip(&self.categorical).map(|(&k, &c)| if c { k } else { 1 }).sum(),
        }
    }

    /// Whether each output column is a code (for naive Bayes).
    pub fn output_categorical(&self) -> Vec<bool> {
        match &self.one_hot {
            None => self.categorical.clone(),
            Some(_) => vec![false; self.n_outputs()],
        }
    }

    pub fn transform_row(&self, row: ArrayView1<f64>) -> Result<Array1<f64>> {
        if row.len() != self.n_inputs() {
            return Err(Error::DimensionMismatch { expected: self.n_inputs(), got: row.len() });
        }
        let mut out = Vec::with_capacity(self.n_outputs());
        for (j, &v) in row.iter().enumerate() {
            match (&self.one_hot, self.categorical[j]) {
                (Some(k), true) => {
                    // Codes outside the fitted range expand to all zeros.
                    out.extend((0..k[j]).map(|c| (v == c as f64) as u8 as f64));
                }
                _ => out.push((v - self.mean[j]) / self.scale[j]),
            }
        }
        Ok(Array1::from(out))
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), self.n_outputs()));
        for (i, row) in x.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&self.transform_row(row)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    NaiveBayes,
    Svm,
    Forest,
    Boost,
    Mlp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] =
        [ModelKind::Logistic, ModelKind::Svm, ModelKind::NaiveBayes, ModelKind::Mlp, ModelKind::Forest, ModelKind::Boost];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Logistic => "logistic",
            ModelKind::NaiveBayes => "naive_bayes",
            ModelKind::Svm => "svm",
            ModelKind::Forest => "forest",
            ModelKind::Boost => "boost",
            ModelKind::Mlp => "mlp",
        }
    }

    pub fn parse(text: &str) -> Result<ModelKind> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == text)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model kind {text}")))
    }
}

/// Hyperparameters for one roster member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Logistic {
        #[serde(default)]
        config: LogisticConfig,
        #[serde(default)]
        one_hot: bool,
    },
    NaiveBayes,
    Svm {
        #[serde(default)]
        config: SvmConfig,
        #[serde(default)]
        one_hot: bool,
    },
    Forest {
        #[serde(default)]
        config: ForestConfig,
    },
    Boost {
        #[serde(default)]
        config: BoostConfig,
    },
    Mlp {
        #[serde(default)]
        config: MlpConfig,
        #[serde(default)]
        one_hot: bool,
    },
}

impl ModelSpec {
    pub fn default_for(kind: ModelKind) -> ModelSpec {
        match kind {
            ModelKind::Logistic => ModelSpec::Logistic { config: LogisticConfig::default(), one_hot: false },
            ModelKind::NaiveBayes => ModelSpec::NaiveBayes,
            ModelKind::Svm => ModelSpec::Svm { config: SvmConfig::default(), one_hot: false },
            ModelKind::Forest => ModelSpec::Forest { config: ForestConfig::default() },
            ModelKind::Boost => ModelSpec::Boost { config: BoostConfig::default() },
            ModelKind::Mlp => ModelSpec::Mlp { config: MlpConfig::default(), one_hot: false },
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Logistic { .. } => ModelKind::Logistic,
            ModelSpec::NaiveBayes => ModelKind::NaiveBayes,
            ModelSpec::Svm { .. } => ModelKind::Svm,
            ModelSpec::Forest { .. } => ModelKind::Forest,
            ModelSpec::Boost { .. } => ModelKind::Boost,
            ModelSpec::Mlp { .. } => ModelKind::Mlp,
        }
    }

    /// Overrides the seed of seeded learners.
    pub fn with_seed(mut self, seed: u64) -> ModelSpec {
        match &mut self {
            ModelSpec::Forest { config } => config.seed = seed,
            ModelSpec::Boost { config } => config.seed = seed,
            ModelSpec::Mlp { config, .. } => config.seed = seed,
            _ => {}
        }
        self
    }

    pub fn fit(&self, name: &str, x: ArrayView2<f64>, y: &[u8], categorical: &[bool]) -> Result<FittedModel> {
        let (standardize, one_hot) = match self {
            ModelSpec::Logistic { one_hot, .. } | ModelSpec::Svm { one_hot, .. } | ModelSpec::Mlp { one_hot, .. } => {
                (true, *one_hot)
            }
            _ => (false, false),
        };
        let preprocess = Preprocessor::fit(x, categorical, standardize, one_hot)?;
        let z = preprocess.transform(x)?;
        let z = z.view();
        let params = match self {
            ModelSpec::Logistic { config, .. } => ModelParams::Logistic(fit_logistic(z, y, config)?.0),
            ModelSpec::NaiveBayes => ModelParams::NaiveBayes(fit_naive_bayes(z, y, &preprocess.output_categorical())?),
            ModelSpec::Svm { config, .. } => ModelParams::Svm(fit_svm(z, y, config)?),
            ModelSpec::Forest { config } => ModelParams::Forest(fit_forest(z, y, config)?),
            ModelSpec::Boost { config } => ModelParams::Boost(fit_boost(z, y, config)?),
            ModelSpec::Mlp { config, .. } => ModelParams::Mlp(fit_mlp(z, y, config)?.0),
        };
        Ok(FittedModel { name: name.to_string(), preprocess, params })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ModelParams {
    Logistic(LogisticModel),
    NaiveBayes(NaiveBayesModel),
    Svm(SvmModel),
    Forest(ForestModel),
    Boost(BoostModel),
    Mlp(MlpModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub name: String,
    pub preprocess: Preprocessor,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: ModelKind,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct Body {
    preprocess: Preprocessor,
    #[serde(flatten)]
    params: ModelParams,
}

impl FittedModel {
    pub fn kind(&self) -> ModelKind {
        match self.params {
            ModelParams::Logistic(_) => ModelKind::Logistic,
            ModelParams::NaiveBayes(_) => ModelKind::NaiveBayes,
            ModelParams::Svm(_) => ModelKind::Svm,
            ModelParams::Forest(_) => ModelKind::Forest,
            ModelParams::Boost(_) => ModelKind::Boost,
            ModelParams::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn predict_proba_batch(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        x.rows().into_iter().map(|r| self.predict_proba(r)).collect()
    }

    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<u8>> {
        x.rows().into_iter().map(|r| self.predict(r)).collect()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header { format: MODEL_FORMAT.into(), version: MODEL_VERSION, kind: self.kind(), name: self.name.clone() };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        serde_json::to_writer(&mut out, &Body { preprocess: self.preprocess.clone(), params: self.params.clone() })?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<FittedModel> {
        let mut lines = input.lines();
        let mut next = |what: &str| -> Result<String> {
            lines.next().transpose()?.ok_or_else(|| Error::ModelFile(format!("missing {what} record")))
        };
        let header: Header = serde_json::from_str(&next("header")?)?;
        if header.format != MODEL_FORMAT || header.version != MODEL_VERSION {
            return Err(Error::ModelFile(format!("unsupported format {} v{}", header.format, header.version)));
        }
        let body: Body = serde_json::from_str(&next("body")?)?;
        let model = FittedModel { name: header.name, preprocess: body.preprocess, params: body.params };
        if model.kind() != header.kind {
            return Err(Error::ModelFile(format!("header kind {:?} does not match body", header.kind)));
        }
        Ok(model)
    }
}

impl Classifier for FittedModel {
    fn predict_proba(&self, row: ArrayView1<f64>) -> Result<f64> {
        let z = self.preprocess.transform_row(row)?;
        let z = z.view();
        match &self.params {
            ModelParams::Logistic(m) => m.predict_proba(z),
            ModelParams::NaiveBayes(m) => m.predict_proba(z),
            ModelParams::Svm(m) => m.predict_proba(z),
            ModelParams::Forest(m) => Ok(m.predict_proba(z)),
            ModelParams::Boost(m) => Ok(m.predict_proba(z)),
            ModelParams::Mlp(m) => m.forward(z),
        }
    }

    fn predict(&self, row: ArrayView1<f64>) -> Result<u8> {
        match &self.params {
            ModelParams::Svm(m) => m.predict(self.preprocess.transform_row(row)?.view()),
            _ => Ok((self.predict_proba(row)? >= 0.5) as u8),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> (Array2<f64>, Vec<u8>, Vec<bool>) {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| match j {
            0 => (i as f64) * 1.7 % 13.0,
            1 => (i % 3) as f64,
            _ => ((i * 7) % 5) as f64 + 20.0,
        });
        let y = (0..40).map(|i| (x[[i, 0]] + x[[i, 1]] > 7.0) as u8).collect();
        (x, y, vec![false, true, false])
    }

    #[test]
    fn standardizes_continuous_columns_only() {
        let (x, _, cat) = toy();
        let p = Preprocessor::fit(x.view(), &cat, true, false).unwrap();
        let z = p.transform(x.view()).unwrap();
        assert!(z.column(0).mean().unwrap().abs() < 1e-12);
        assert!((z.column(0).mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(z.column(1), x.column(1));
    }

    #[test]
    fn one_hot_expands_codes() {
        let (x, _, cat) = toy();
        let p = Preprocessor::fit(x.view(), &cat, false, true).unwrap();
        assert_eq!(p.n_outputs(), 5);
        let z = p.transform_row(array![1.0, 2.0, 3.0].view()).unwrap();
        assert_eq!(z.to_vec(), vec![1.0, 0.0, 0.0, 1.0, 3.0]);
        let unseen = p.transform_row(array![1.0, 9.0, 3.0].view()).unwrap();
        assert_eq!(unseen.to_vec(), vec![1.0, 0.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn every_kind_round_trips_through_a_model_file() {
        let (x, y, cat) = toy();
        for kind in ModelKind::ALL {
            let spec = match ModelSpec::default_for(kind) {
                ModelSpec::Forest { config } => ModelSpec::Forest { config: ForestConfig { n_trees: 5, ..config } },
                ModelSpec::Boost { config } => ModelSpec::Boost { config: BoostConfig { n_estimators: 5, ..config } },
                ModelSpec::Mlp { config, one_hot } => {
                    ModelSpec::Mlp { config: MlpConfig { width: 4, max_epochs: 5, ..config }, one_hot }
                }
                other => other,
            };
            let m = spec.fit(kind.as_str(), x.view(), &y, &cat).unwrap();
            let mut buf = Vec::new();
            m.write(&mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert_eq!(text.lines().count(), 2);
            assert!(text.starts_with("{\"format\":\"crs-model\",\"version\":1,"));
            let back = FittedModel::read(buf.as_slice()).unwrap();
            assert_eq!(back.kind(), kind);
            for i in 0..x.nrows() {
                assert_eq!(back.predict_proba(x.row(i)).unwrap(), m.predict_proba(x.row(i)).unwrap());
            }
        }
    }

    #[test]
    fn rejects_foreign_model_files() {
        let bad = "{\"format\":\"other\",\"version\":1,\"kind\":\"svm\",\"name\":\"x\"}\n{}\n";
        assert!(matches!(FittedModel::read(bad.as_bytes()), Err(Error::ModelFile(_))));
        assert!(matches!(FittedModel::read("".as_bytes()), Err(Error::ModelFile(_))));
    }

    #[test]
    fn closures_are_classifiers() {
        let c = |r: ArrayView1<f64>| if r[0] > 0.0 { 0.8 } else { 0.2 };
        assert_eq!(Classifier::predict(&c, array![1.0].view()).unwrap(), 1);
        assert_eq!(Classifier::predict(&c, array![-1.0].view()).unwrap(), 0);
    }

    #[test]
    fn spec_parses_from_toml() {
        let spec: ModelSpec = toml::from_str("kind = \"boost\"\n[config]\nn_estimators = 7\n").unwrap();
        assert_eq!(spec.kind(), ModelKind::Boost);
        let ModelSpec::Boost { config } = spec else { panic!() };
        assert_eq!((config.n_estimators, config.max_depth), (7, 3));
    }
}
