#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use crs_serve::cli::{run, BenchCommand, Cli, Command};
use crs_serve::http::{router, AppState};
use crs_serve::workspace::Workspace;
use crs_serve::Config;
use http_body_util::BodyExt;
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

/// Acceptance cohort with the two models tuning selects on it (logistic at
/// lambda 0.1, MLP width 50) fitted directly.
pub const CONFIG: &str = r#"
[pipeline]
mlp_widths = []
lr_lambdas = []

[[pipeline.roster]]
kind = "logistic"
config = { lambda = 0.1 }

[[pipeline.roster]]
kind = "mlp"
config = { width = 50 }

[serve]
admin_token = "admin-secret"
snapshot_every = 4

[[serve.raters]]
name = "D1"
token = "tok-d1"

[[serve.raters]]
name = "D2"
token = "tok-d2"

[serve.guidance]
_case = "Classify the expected six-month outcome."
SNOT22_BLN_TOTAL = "Baseline SNOT-22 total, 0 to 110."
"#;

pub fn config_for(dir: &Path, extra: &str) -> Config {
    let mut c = Config::from_toml(&format!("{CONFIG}\n{extra}")).unwrap();
    c.data_dir = dir.to_path_buf();
    c.finalize().unwrap()
}

pub fn cli(dir: &Path, config: &Path, command: Command) -> Cli {
    Cli { config: Some(config.to_path_buf()), seed: None, data_dir: Some(dir.to_path_buf()), port: None, command }
}

/// Data directory with the cohort, split, models and a 30-case benchmark
/// subset, built once per test binary.
pub fn prepared() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("crs.toml");
        std::fs::write(&cfg, CONFIG).unwrap();
        for c in [
            Command::Synth { output: None },
            Command::Ingest { input: None },
            Command::Split,
            Command::Train { model: "all".into() },
            Command::Bench(BenchCommand::Stratify { model: None, k: None }),
        ] {
            run(cli(dir.path(), &cfg, c)).unwrap();
        }
        dir
    })
    .path()
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            if e.file_name() != "labels" {
                copy_dir(&e.path(), &target);
            }
        } else {
            std::fs::copy(e.path(), target).unwrap();
        }
    }
}

/// Private copy of the prepared directory with an empty label store.
pub fn fork() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(prepared(), dir.path());
    dir
}

pub fn app_in(dir: &Path, extra: &str) -> Router {
    let cfg = config_for(dir, extra);
    router(AppState::load(&cfg, &Workspace::new(dir)).unwrap())
}

pub fn app_with_active(dir: &Path, active: &str) -> Router {
    let mut cfg = config_for(dir, "");
    cfg.serve.active_model = active.into();
    router(AppState::load(&cfg, &Workspace::new(dir)).unwrap())
}

pub struct Reply {
    pub status: StatusCode,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, bytes }
}

/// A record at the favorable end of every planted driver.
pub fn planted_extreme() -> Value {
    let schema = crs_core::Schema::crs_default();
    let mut rec = serde_json::Map::new();
    for f in &schema.features {
        let v = match f.name.as_str() {
            "SNOT22_BLN_TOTAL" => Value::from(110),
            "BLN_CT_TOTAL" => Value::from(24),
            "AGE" => Value::from(18),
            "BLN_ENDO_TOTAL" => Value::from(20),
            "ALLERGY_TESTING" | "CRS_POLYPS" => Value::from("Yes"),
            "PREVIOUS_SURGERY" => Value::from("No"),
            _ => match f.encoding().first() {
                Some((label, _)) => Value::from(*label),
                None => Value::from(0),
            },
        };
        rec.insert(f.name.clone(), v);
    }
    Value::Object(rec)
}

/// A mid-range record with a low baseline score.
pub fn low_record() -> Value {
    let mut rec = planted_extreme();
    let m = rec.as_object_mut().unwrap();
    m.insert("SNOT22_BLN_TOTAL".into(), Value::from(12));
    m.insert("BLN_CT_TOTAL".into(), Value::from(6));
    m.insert("AGE".into(), Value::from(60));
    m.insert("BLN_ENDO_TOTAL".into(), Value::from(4));
    m.insert("ALLERGY_TESTING".into(), Value::from("No"));
    m.insert("PREVIOUS_SURGERY".into(), Value::from("Yes"));
    rec
}

pub fn test_ids(dir: &Path) -> Vec<String> {
    let s: Value = serde_json::from_slice(&std::fs::read(dir.join("split.json")).unwrap()).unwrap();
    s["test_ids"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect()
}

pub fn subset_ids(dir: &Path) -> Vec<String> {
    let s: Value = serde_json::from_slice(&std::fs::read(dir.join("bench/subset.json")).unwrap()).unwrap();
    s["cases"].as_array().unwrap().iter().map(|c| c["case_id"].as_str().unwrap().to_string()).collect()
}

pub fn bin_path() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_crs"))
}
