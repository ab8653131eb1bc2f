//! TOML configuration shared by every subcommand and the service.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crs_core::ingest::{default_drop_columns, CleanOptions, SyntheticSpec};
use crs_core::pipeline::PipelineConfig;
use crs_core::Schema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ServeError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data_dir: PathBuf,
    /// Schema file; the built-in CRS schema when absent.
    pub schema: Option<PathBuf>,
    pub synth: SynthConfig,
    pub clean: CleanOptions,
    pub pipeline: PipelineConfig,
    pub explain: ExplainConfig,
    pub bench: BenchConfig,
    pub serve: ServeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub prevalence: f64,
    pub signal_strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub model: String,
    pub repeats: usize,
    pub background: usize,
    /// Coalition budget when the feature count rules out enumeration.
    pub shap_budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub model: String,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaterToken {
    pub name: String,
    pub token: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
    pub port: u16,
    pub threshold: f64,
    /// A roster member name, or `ensemble` for the mean posterior of all loaded models.
    pub active_model: String,
    pub snapshot_every: u64,
    pub admin_token: Option<String>,
    pub raters: Vec<RaterToken>,
    /// Free-text guidance shown with each case, keyed by feature name or `_case`.
    pub guidance: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            data_dir: PathBuf::from("data"),
            schema: None,
            synth: SynthConfig::default(),
            clean: CleanOptions { drop_columns: default_drop_columns(), ..Default::default() },
            pipeline: PipelineConfig::default(),
            explain: ExplainConfig::default(),
            bench: BenchConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        let a = SyntheticSpec::acceptance();
        SynthConfig { n: a.n, prevalence: a.prevalence, signal_strength: a.signal_strength }
    }
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            model: "mlp".into(),
            repeats: crs_core::explain::DEFAULT_REPEATS,
            background: crs_core::explain::DEFAULT_BACKGROUND,
            shap_budget: 1024,
        }
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { model: "mlp".into(), k: 10 }
    }
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            threshold: 0.5,
            active_model: "mlp".into(),
            snapshot_every: 64,
            admin_token: None,
            raters: Vec::new(),
            guidance: BTreeMap::new(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        toml::from_str(text).map_err(|e| ServeError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServeError::Config(format!("{}: {e}", path.display())))?;
        Config::from_toml(&text)
    }

    /// Makes the top-level seed authoritative and checks value ranges.
    pub fn finalize(mut self) -> Result<Config> {
        self.pipeline.seed = self.seed;
        check_threshold(self.serve.threshold)?;
        if self.serve.snapshot_every == 0 {
            return Err(ServeError::Config("serve.snapshot_every must be >= 1".into()));
        }
        if self.bench.k == 0 {
            return Err(ServeError::Config("bench.k must be >= 1".into()));
        }
        let mut tokens: Vec<&str> = self.serve.raters.iter().map(|r| r.token.as_str()).collect();
        tokens.extend(self.serve.admin_token.as_deref());
        tokens.sort_unstable();
        if tokens.windows(2).any(|w| w[0] == w[1]) {
            return Err(ServeError::Config("bearer tokens must be unique".into()));
        }
        self.synthetic_spec().validate()?;
        Ok(self)
    }

    pub fn schema(&self) -> Result<Schema> {
        match &self.schema {
            Some(p) => Ok(Schema::load(p)?),
            None => Ok(Schema::crs_default()),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n: self.synth.n,
            prevalence: self.synth.prevalence,
            signal_strength: self.synth.signal_strength,
            seed: self.seed,
        }
    }

    /// SHA-256 of the canonical JSON form of the effective config. The data
    /// directory is left out so identical runs in two places hash alike.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Registry thresholds live strictly inside (0, 1).
pub fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(ServeError::InvalidThreshold(t, "(0, 1)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("").unwrap().finalize().unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.serve.threshold, 0.5);
        assert_eq!(c.synthetic_spec(), SyntheticSpec::acceptance());
    }

    #[test]
    fn seed_propagates_and_changes_hash() {
        let a = Config::from_toml("seed = 3").unwrap().finalize().unwrap();
        let b = Config::from_toml("seed = 4").unwrap().finalize().unwrap();
        assert_eq!(a.pipeline.seed, 3);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml("[serve]\nthreshold = 1.0").unwrap().finalize().is_err());
        assert!(Config::from_toml("[serve]\nthreshold = 0.0").unwrap().finalize().is_err());
        assert!(Config::from_toml("unknown = 1").is_err());
        let dup = "[serve]\nadmin_token = \"t\"\n[[serve.raters]]\nname = \"a\"\ntoken = \"t\"\n";
        assert!(Config::from_toml(dup).unwrap().finalize().is_err());
    }

    #[test]
    fn pipeline_section_parses() {
        let c = Config::from_toml("[pipeline]\nmlp_widths = [8]\nlr_lambdas = []\n").unwrap();
        assert_eq!(c.pipeline.mlp_widths, vec![8]);
        assert!(c.pipeline.lr_lambdas.is_empty());
        assert_eq!(c.pipeline.roster.len(), 6);
    }

    #[test]
    fn example_file_matches_defaults() {
        let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../crs.example.toml")).unwrap();
        let mut c = Config::from_toml(&text).unwrap().finalize().unwrap();
        assert_eq!(c.serve.raters.len(), 1);
        c.serve.admin_token = None;
        c.serve.raters.clear();
        c.serve.guidance.clear();
        assert_eq!(c, Config::default().finalize().unwrap());
    }
}
