//! JSON endpoints. Field names are documented in docs/http.md.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use crs_core::bench::{ExpertLabel, Tier};
use crs_core::explain::{permutation_importance_all, shap_values, stratified_background, FeatureImportance};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::Config;
use crate::error::{Result, ServeError};
use crate::registry::{check_request_threshold, decide, decode_row, record_row, ModelRegistry};
use crate::store::{LabelStore, Session};
use crate::workspace::Workspace;

#[derive(Clone, Debug, Serialize)]
pub struct CaseView {
    pub index: usize,
    pub case_id: String,
    pub tier: Option<Tier>,
    pub fields: BTreeMap<String, Value>,
}

#[derive(Debug, PartialEq)]
pub enum Caller {
    Rater(String),
    Admin,
}

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<ModelRegistry>,
    pub store: Arc<Mutex<LabelStore>>,
    pub cases: Arc<Vec<CaseView>>,
    pub guidance: Arc<BTreeMap<String, String>>,
    tokens: Arc<BTreeMap<String, String>>,
    raters: Arc<Vec<String>>,
    admin_token: Option<Arc<str>>,
    shap_budget: usize,
    seed: u64,
}

impl AppState {
    /// Loads models, background rows, the global importance snapshot, the
    /// case queue and the label store from the data directory.
    pub fn load(cfg: &Config, ws: &Workspace) -> Result<AppState> {
        let schema = cfg.schema()?;
        let mut registry = ModelRegistry::new(schema.clone(), ws.load_models()?, &cfg.serve.active_model, cfg.serve.threshold)?;
        let mut cases = Vec::new();
        if ws.cohort_csv().exists() && ws.split_json().exists() {
            let (train, test) = ws.load_train_test(&schema)?;
            let rows = stratified_background(&train.labels, cfg.explain.background, cfg.seed);
            registry.background = Some(train.features.select(Axis(0), &rows));
            if let Ok((_, model)) = registry.active() {
                let imp = permutation_importance_all(
                    model.as_ref(),
                    test.features.view(),
                    &test.labels,
                    &test.feature_names,
                    cfg.explain.repeats,
                    cfg.seed,
                )?;
                registry.importance = Some(imp);
            }
            let subset = ws.load_subset()?;
            let queue: Vec<(String, Option<Tier>)> = match &subset {
                Some(s) => s.cases.iter().map(|c| (c.case_id.clone(), Some(c.tier))).collect(),
                None => test.ids.iter().map(|id| (id.clone(), None)).collect(),
            };
            for (index, (case_id, tier)) in queue.into_iter().enumerate() {
                let i = test.ids.iter().position(|x| *x == case_id).ok_or_else(|| ServeError::UnknownCase(case_id.clone()))?;
                cases.push(CaseView { index, case_id, tier, fields: decode_row(test.row(i), &schema) });
            }
        }
        let store = LabelStore::open(&ws.labels_dir(), cfg.serve.snapshot_every)?;
        Ok(AppState {
            registry: Arc::new(registry),
            store: Arc::new(Mutex::new(store)),
            cases: Arc::new(cases),
            guidance: Arc::new(cfg.serve.guidance.clone()),
            tokens: Arc::new(cfg.serve.raters.iter().map(|r| (r.token.clone(), r.name.clone())).collect()),
            raters: Arc::new(cfg.serve.raters.iter().map(|r| r.name.clone()).collect()),
            admin_token: cfg.serve.admin_token.as_deref().map(Arc::from),
            shap_budget: cfg.explain.shap_budget,
            seed: cfg.seed,
        })
    }

    pub fn caller(&self, headers: &HeaderMap) -> Result<Caller> {
        let token = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or(ServeError::Unauthorized)?;
        if self.admin_token.as_deref() == Some(token) {
            return Ok(Caller::Admin);
        }
        self.tokens.get(token).map(|r| Caller::Rater(r.clone())).ok_or(ServeError::Unauthorized)
    }

    fn rater(&self, headers: &HeaderMap) -> Result<String> {
        match self.caller(headers)? {
            Caller::Rater(r) => Ok(r),
            Caller::Admin => Err(ServeError::Forbidden("label submission (admin is not a rater)".into())),
        }
    }

    /// Caller may act for `rater`: that rater or the admin.
    fn act_for(&self, headers: &HeaderMap, rater: &str) -> Result<()> {
        let caller = self.caller(headers)?;
        if !self.raters.iter().any(|r| r == rater) {
            return Err(ServeError::UnknownRater(rater.to_string()));
        }
        match caller {
            Caller::Admin => Ok(()),
            Caller::Rater(r) if r == rater => Ok(()),
            Caller::Rater(_) => Err(ServeError::Forbidden(format!("rater {rater}"))),
        }
    }

    fn known_case(&self, case_id: &str) -> Result<()> {
        if self.cases.iter().any(|c| c.case_id == case_id) {
            Ok(())
        } else {
            Err(ServeError::UnknownCase(case_id.to_string()))
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn body<T>(payload: std::result::Result<Json<T>, JsonRejection>) -> Result<T> {
    payload.map(|Json(v)| v).map_err(|e| ServeError::BadRequest(e.body_text()))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/predict", post(predict))
        .route("/whatif", post(whatif))
        .route("/explain", post(explain))
        .route("/cases", get(cases))
        .route("/labels", get(list_labels).post(submit_label))
        .route("/sessions/{rater}", get(get_session).put(put_session))
        .route("/admin/threshold", put(set_threshold))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tracing::info!("listening on {local}");
    println!("listening on {local}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    model_name: Option<String>,
    threshold: f64,
    models: Vec<String>,
    cases: usize,
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok",
        model_name: s.registry.active().ok().map(|(n, _)| n.to_string()),
        threshold: s.registry.threshold(),
        models: s.registry.model_names(),
        cases: s.cases.len(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub record: BTreeMap<String, Value>,
    pub threshold: Option<f64>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub model_name: String,
    pub probability: f64,
    pub threshold: f64,
    pub decision: u8,
}

async fn predict(State(s): State<AppState>, req: std::result::Result<Json<PredictRequest>, JsonRejection>) -> Result<Json<PredictResponse>> {
    let req = body(req)?;
    s.registry.active()?;
    let row = record_row(&req.record, &s.registry.schema)?;
    let threshold = match req.threshold {
        Some(t) => {
            check_request_threshold(t)?;
            t
        }
        None => s.registry.threshold(),
    };
    let (model_name, probability) = s.registry.probability(row.view())?;
    Ok(Json(PredictResponse { model_name, probability, threshold, decision: decide(probability, threshold) }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    pub record: BTreeMap<String, Value>,
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
    pub threshold: Option<f64>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub model_name: String,
    pub baseline_probability: f64,
    pub modified_probability: f64,
    pub threshold: f64,
    pub modified_threshold: f64,
    pub baseline_decision: u8,
    pub modified_decision: u8,
    pub flip: bool,
}

/// The baseline is the record at the registry threshold; the modified case
/// applies the overrides and the request threshold.
async fn whatif(State(s): State<AppState>, req: std::result::Result<Json<WhatIfRequest>, JsonRejection>) -> Result<Json<WhatIfResponse>> {
    let req = body(req)?;
    s.registry.active()?;
    let base_row = record_row(&req.record, &s.registry.schema)?;
    let mut modified = req.record.clone();
    modified.extend(req.overrides);
    let mod_row = record_row(&modified, &s.registry.schema)?;
    let threshold = s.registry.threshold();
    let modified_threshold = match req.threshold {
        Some(t) => {
            check_request_threshold(t)?;
            t
        }
        None => threshold,
    };
    let (model_name, baseline_probability) = s.registry.probability(base_row.view())?;
    let (_, modified_probability) = s.registry.probability(mod_row.view())?;
    let baseline_decision = decide(baseline_probability, threshold);
    let modified_decision = decide(modified_probability, modified_threshold);
    Ok(Json(WhatIfResponse {
        model_name,
        baseline_probability,
        modified_probability,
        threshold,
        modified_threshold,
        baseline_decision,
        modified_decision,
        flip: baseline_decision != modified_decision,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainRequest {
    pub record: BTreeMap<String, Value>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub feature: String,
    pub value: Value,
    pub phi: f64,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub model_name: String,
    pub probability: f64,
    pub base_value: f64,
    pub exact: bool,
    pub efficiency_residual: f64,
    /// Ordered by decreasing |phi|.
    pub attributions: Vec<Attribution>,
    pub global_importance: Vec<FeatureImportance>,
}

async fn explain(State(s): State<AppState>, req: std::result::Result<Json<ExplainRequest>, JsonRejection>) -> Result<Json<ExplainResponse>> {
    let req = body(req)?;
    s.registry.active()?;
    let row = record_row(&req.record, &s.registry.schema)?;
    let state = s.clone();
    let response = tokio::task::spawn_blocking(move || -> Result<ExplainResponse> {
        let reg = &state.registry;
        let (name, model) = reg.active()?;
        let background = reg.background.as_ref().ok_or_else(|| ServeError::MissingArtifact("split.json".into()))?;
        let r = shap_values(model.as_ref(), row.view(), background.view(), state.shap_budget, state.seed)?;
        let shown = decode_row(row.view(), &reg.schema);
        let mut attributions: Vec<Attribution> = reg
            .schema
            .features
            .iter()
            .zip(&r.phi)
            .map(|(f, &phi)| Attribution { feature: f.name.clone(), value: shown[&f.name].clone(), phi })
            .collect();
        attributions.sort_by(|a, b| b.phi.abs().total_cmp(&a.phi.abs()).then_with(|| a.feature.cmp(&b.feature)));
        Ok(ExplainResponse {
            model_name: name.to_string(),
            probability: r.fx,
            base_value: r.base_value,
            exact: r.exact,
            efficiency_residual: r.efficiency_residual(),
            attributions,
            global_importance: reg.importance.as_ref().map(|i| i.features.clone()).unwrap_or_default(),
        })
    })
    .await
    .map_err(|e| ServeError::BadRequest(format!("explanation task failed: {e}")))??;
    Ok(Json(response))
}

#[derive(Serialize)]
struct CasesResponse<'a> {
    guidance: &'a BTreeMap<String, String>,
    cases: &'a [CaseView],
}

async fn cases(State(s): State<AppState>, headers: HeaderMap) -> Result<Json<Value>> {
    s.caller(&headers)?;
    Ok(Json(serde_json::to_value(CasesResponse { guidance: &s.guidance, cases: &s.cases })?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRequest {
    pub case_id: String,
    pub call: u8,
    pub confidence: i64,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub label: ExpertLabel,
    pub history_length: usize,
}

async fn submit_label(
    State(s): State<AppState>,
    headers: HeaderMap,
    req: std::result::Result<Json<LabelRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<LabelResponse>)> {
    let rater = s.rater(&headers)?;
    let req = body(req)?;
    s.known_case(&req.case_id)?;
    let mut store = s.store.lock().expect("store lock");
    let label = store.submit(&rater, &req.case_id, req.call, req.confidence, now_ms())?;
    let history_length = store.state().history(&rater, &req.case_id).len();
    Ok((StatusCode::CREATED, Json(LabelResponse { label, history_length })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelQuery {
    pub rater: Option<String>,
    pub case_id: Option<String>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct LatestLabel {
    #[serde(flatten)]
    pub label: ExpertLabel,
    pub history_length: usize,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelList {
    pub rater: String,
    pub labels: Vec<LatestLabel>,
    /// Every revision of `case_id`, oldest first, when the query names one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<ExpertLabel>>,
}

async fn list_labels(
    State(s): State<AppState>,
    headers: HeaderMap,
    query: std::result::Result<Query<LabelQuery>, QueryRejection>,
) -> Result<Json<LabelList>> {
    let Query(q) = query.map_err(|e| ServeError::BadRequest(e.body_text()))?;
    let rater = match (s.caller(&headers)?, q.rater) {
        (Caller::Rater(r), None) => r,
        (_, Some(r)) => {
            s.act_for(&headers, &r)?;
            r
        }
        (Caller::Admin, None) => return Err(ServeError::BadRequest("admin must name a rater".into())),
    };
    if let Some(c) = &q.case_id {
        s.known_case(c)?;
    }
    let store = s.store.lock().expect("store lock");
    let state = store.state();
    let labels = state.latest_for(&rater).into_iter().map(|(label, history_length)| LatestLabel { label, history_length }).collect();
    let history = q.case_id.map(|c| state.history(&rater, &c).into_iter().cloned().collect());
    Ok(Json(LabelList { rater, labels, history }))
}

async fn get_session(State(s): State<AppState>, headers: HeaderMap, Path(rater): Path<String>) -> Result<Json<Session>> {
    s.act_for(&headers, &rater)?;
    let store = s.store.lock().expect("store lock");
    let session = store.state().sessions.get(&rater).cloned();
    Ok(Json(session.unwrap_or(Session { rater, cursor: 0, case_id: None, timestamp: 0 })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    pub cursor: usize,
    pub case_id: Option<String>,
}

async fn put_session(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(rater): Path<String>,
    req: std::result::Result<Json<SessionRequest>, JsonRejection>,
) -> Result<Json<Session>> {
    s.act_for(&headers, &rater)?;
    let req = body(req)?;
    if req.cursor > s.cases.len() {
        return Err(ServeError::BadRequest(format!("cursor {} beyond {} cases", req.cursor, s.cases.len())));
    }
    if let Some(c) = &req.case_id {
        s.known_case(c)?;
    }
    let session = Session { rater, cursor: req.cursor, case_id: req.case_id, timestamp: now_ms() };
    s.store.lock().expect("store lock").put_session(session.clone())?;
    Ok(Json(session))
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBody {
    pub threshold: f64,
}

async fn set_threshold(
    State(s): State<AppState>,
    headers: HeaderMap,
    req: std::result::Result<Json<ThresholdBody>, JsonRejection>,
) -> Result<Json<ThresholdBody>> {
    if s.caller(&headers)? != Caller::Admin {
        return Err(ServeError::Forbidden("threshold changes".into()));
    }
    let req = body(req)?;
    s.registry.set_threshold(req.threshold)?;
    Ok(Json(ThresholdBody { threshold: s.registry.threshold() }))
}
