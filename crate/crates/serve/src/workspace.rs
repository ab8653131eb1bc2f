//! Artifact layout under the data directory.
//!
//! ```text
//! synthetic_cohort.csv   raw generated cohort (synth)
//! cohort.csv             cleaned, encoded cohort (ingest)
//! clean_report.jsonl     drop accounting (ingest)
//! split.json             train/test case ids (split)
//! models/                fitted models, specs.json, tuning.json (train)
//! reports/               evaluation and ensemble reports
//! explain/               importance, attribution, PCA and correlation tables
//! bench/                 benchmark subset and reader-study reports
//! labels/                expert-label event log and snapshot (serve)
//! manifests/             one manifest per command
//! ```

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crs_core::bench::BenchmarkSubset;
use crs_core::eval::SplitAssignment;
use crs_core::{FittedModel, LabeledDataset, Schema};

use crate::error::{Result, ServeError};

#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Workspace {
        Workspace { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn synthetic_csv(&self) -> PathBuf {
        self.path("synthetic_cohort.csv")
    }
    pub fn cohort_csv(&self) -> PathBuf {
        self.path("cohort.csv")
    }
    pub fn split_json(&self) -> PathBuf {
        self.path("split.json")
    }
    pub fn model_path(&self, name: &str) -> PathBuf {
        self.path("models").join(format!("{name}.model"))
    }
    pub fn subset_json(&self) -> PathBuf {
        self.path("bench/subset.json")
    }
    pub fn labels_dir(&self) -> PathBuf {
        self.path("labels")
    }

    /// Data-dir-relative form used in manifests.
    pub fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    pub fn write(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    fn open(&self, path: &Path) -> Result<File> {
        File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ServeError::MissingArtifact(self.relative(path)),
            _ => e.into(),
        })
    }

    pub fn read_dataset(&self, path: &Path, schema: &Schema) -> Result<LabeledDataset> {
        let categorical: Vec<String> =
            schema.features.iter().filter(|f| f.is_categorical()).map(|f| f.name.clone()).collect();
        Ok(LabeledDataset::read_csv(BufReader::new(self.open(path)?), &categorical)?)
    }

    pub fn load_cohort(&self, schema: &Schema) -> Result<LabeledDataset> {
        self.read_dataset(&self.cohort_csv(), schema)
    }

    pub fn load_split(&self) -> Result<SplitAssignment> {
        Ok(serde_json::from_reader(BufReader::new(self.open(&self.split_json())?))?)
    }

    pub fn load_train_test(&self, schema: &Schema) -> Result<(LabeledDataset, LabeledDataset)> {
        let data = self.load_cohort(schema)?;
        Ok(self.load_split()?.apply(&data)?)
    }

    pub fn load_model(&self, name: &str) -> Result<FittedModel> {
        Ok(FittedModel::read(BufReader::new(self.open(&self.model_path(name))?))?)
    }

    /// Every `models/*.model`, ordered by file name.
    pub fn load_models(&self) -> Result<Vec<FittedModel>> {
        let dir = self.path("models");
        let Ok(entries) = std::fs::read_dir(&dir) else {
            return Ok(Vec::new());
        };
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "model"))
            .collect();
        paths.sort();
        paths.iter().map(|p| Ok(FittedModel::read(BufReader::new(self.open(p)?))?)).collect()
    }

    pub fn load_subset(&self) -> Result<Option<BenchmarkSubset>> {
        let path = self.subset_json();
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_reader(BufReader::new(self.open(&path)?))?))
    }
}
