mod common;

use axum::http::{Method, StatusCode};
use common::*;
use serde_json::{json, Value};

fn record_with(base: &Value, field: &str, v: Value) -> Value {
    let mut r = base.clone();
    r.as_object_mut().unwrap().insert(field.into(), v);
    r
}

#[tokio::test]
async fn extreme_planted_record_is_confident() {
    let app = app_in(prepared(), "");
    let r = call(&app, Method::POST, "/predict", None, Some(json!({ "record": planted_extreme() }))).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["model_name"], "mlp");
    assert!(v["probability"].as_f64().unwrap() > 0.9, "{v}");
    assert_eq!(v["decision"], 1);
    assert_eq!(v["threshold"], 0.5);
}

#[tokio::test]
async fn out_of_range_snot_names_the_field() {
    let app = app_in(prepared(), "");
    let rec = record_with(&planted_extreme(), "SNOT22_BLN_TOTAL", json!(140));
    for path in ["/predict", "/whatif", "/explain"] {
        let r = call(&app, Method::POST, path, None, Some(json!({ "record": rec }))).await;
        assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{path}");
        let v = r.json();
        assert_eq!(v["error"], "ValidationFailed");
        let fields: Vec<&str> = v["violations"].as_array().unwrap().iter().map(|x| x["feature"].as_str().unwrap()).collect();
        assert_eq!(fields, ["SNOT22_BLN_TOTAL"], "{path}");
    }
}

#[tokio::test]
async fn malformed_body_is_a_json_error() {
    let app = app_in(prepared(), "");
    let r = call(&app, Method::POST, "/predict", None, Some(json!({ "fields": {} }))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["error"], "BadRequest");
}

#[tokio::test]
async fn threshold_one_decides_zero_below_certainty() {
    let app = app_in(prepared(), "");
    for rec in [planted_extreme(), low_record()] {
        let v = call(&app, Method::POST, "/predict", None, Some(json!({ "record": rec, "threshold": 1.0 }))).await.json();
        let p = v["probability"].as_f64().unwrap();
        assert_eq!(v["decision"].as_u64().unwrap(), (p == 1.0) as u64, "p = {p}");
        // A threshold equal to the probability decides 1.
        let at = call(&app, Method::POST, "/predict", None, Some(json!({ "record": rec, "threshold": p }))).await.json();
        assert_eq!(at["decision"], 1);
    }
    for bad in [0.0, 1.5, -0.1] {
        let r = call(&app, Method::POST, "/predict", None, Some(json!({ "record": low_record(), "threshold": bad }))).await;
        assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    }
}

#[tokio::test]
async fn predict_is_byte_deterministic() {
    let app = app_in(prepared(), "");
    let body = json!({ "record": low_record() });
    let a = call(&app, Method::POST, "/predict", None, Some(body.clone())).await;
    let b = call(&app, Method::POST, "/predict", None, Some(body.clone())).await;
    let other = app_in(prepared(), "");
    let c = call(&other, Method::POST, "/predict", None, Some(body)).await;
    assert_eq!(a.bytes, b.bytes);
    assert_eq!(a.bytes, c.bytes);
}

#[tokio::test]
async fn no_active_model_is_a_conflict() {
    let app = app_in(prepared(), "");
    let dir = fork();
    std::fs::remove_dir_all(dir.path().join("models")).unwrap();
    let empty = app_in(dir.path(), "");
    for path in ["/predict", "/whatif", "/explain"] {
        let r = call(&empty, Method::POST, path, None, Some(json!({ "record": low_record() }))).await;
        assert_eq!(r.status, StatusCode::CONFLICT, "{path}");
        assert_eq!(r.json()["error"], "NoActiveModel");
    }
    let ok = call(&app, Method::POST, "/predict", None, Some(json!({ "record": low_record() }))).await;
    assert_eq!(ok.status, StatusCode::OK);
}

#[tokio::test]
async fn ensemble_is_the_mean_of_members() {
    let rec = json!({ "record": low_record() });
    let prob = |active: &'static str| {
        let rec = rec.clone();
        async move {
            let v = call(&app_with_active(prepared(), active), Method::POST, "/predict", None, Some(rec)).await.json();
            assert_eq!(v["model_name"], active);
            v["probability"].as_f64().unwrap()
        }
    };
    let (ens, mlp, lr) = (prob("ensemble").await, prob("mlp").await, prob("logistic").await);
    assert!((ens - (mlp + lr) / 2.0).abs() < 1e-12);
}

#[tokio::test]
async fn whatif_contract() {
    let app = app_in(prepared(), "");
    let base = low_record();
    let same = call(&app, Method::POST, "/whatif", None, Some(json!({ "record": base, "overrides": {} }))).await.json();
    assert_eq!(same["baseline_probability"], same["modified_probability"]);
    assert_eq!(same["flip"], false);
    let p = same["baseline_probability"].as_f64().unwrap();
    assert!(p < 0.5, "low record should start below the default threshold, p = {p}");
    assert_eq!(same["baseline_decision"], 0);

    // Lowering the threshold below the baseline probability flips 0 -> 1.
    let lowered = call(&app, Method::POST, "/whatif", None, Some(json!({ "record": base, "threshold": p / 2.0 }))).await.json();
    assert_eq!((lowered["baseline_decision"].as_u64(), lowered["modified_decision"].as_u64()), (Some(0), Some(1)));
    assert_eq!(lowered["flip"], true);
    assert_eq!(lowered["modified_probability"].as_f64(), Some(p));

    // Overrides are validated like records.
    let bad = call(&app, Method::POST, "/whatif", None, Some(json!({ "record": base, "overrides": { "AGE": 7 } }))).await;
    assert_eq!(bad.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(bad.json()["violations"][0]["feature"], "AGE");
}

/// Raising the planted driver never lowers the logistic model's probability,
/// whose fitted weight on it is positive; checked on every test-set case.
#[tokio::test]
async fn whatif_is_monotone_in_baseline_snot() {
    let app = app_with_active(prepared(), "logistic");
    let body = call(&app, Method::GET, "/cases", Some("tok-d1"), None).await.json();
    for case in body["cases"].as_array().unwrap() {
        let rec = case["fields"].clone();
        let mut last = -1.0;
        for snot in (0..=110).step_by(10) {
            let v = call(&app, Method::POST, "/whatif", None, Some(json!({ "record": rec, "overrides": { "SNOT22_BLN_TOTAL": snot } })))
                .await
                .json();
            let p = v["modified_probability"].as_f64().unwrap();
            assert!(p >= last, "case {}: {p} after {last}", case["case_id"]);
            last = p;
        }
    }
}

#[tokio::test]
async fn explain_satisfies_efficiency_and_ranks_the_driver() {
    let app = app_in(prepared(), "");
    for rec in [planted_extreme(), low_record()] {
        let pred = call(&app, Method::POST, "/predict", None, Some(json!({ "record": rec }))).await.json();
        let r = call(&app, Method::POST, "/explain", None, Some(json!({ "record": rec }))).await;
        assert_eq!(r.status, StatusCode::OK);
        let v = r.json();
        let attributions = v["attributions"].as_array().unwrap();
        assert_eq!(attributions.len(), 30);
        let sum: f64 = attributions.iter().map(|a| a["phi"].as_f64().unwrap()).sum();
        let base = v["base_value"].as_f64().unwrap();
        let fx = v["probability"].as_f64().unwrap();
        assert!((sum + base - fx).abs() < 1e-4);
        assert!(v["efficiency_residual"].as_f64().unwrap() < 1e-4);
        assert!((fx - pred["probability"].as_f64().unwrap()).abs() < 1e-12);
        assert_eq!(attributions[0]["feature"], "SNOT22_BLN_TOTAL");
        let mags: Vec<f64> = attributions.iter().map(|a| a["phi"].as_f64().unwrap().abs()).collect();
        assert!(mags.windows(2).all(|w| w[0] >= w[1]));
        let global = v["global_importance"].as_array().unwrap();
        assert_eq!(global.len(), 30);
        assert_eq!(global[0]["feature"], "SNOT22_BLN_TOTAL");
    }
}

#[tokio::test]
async fn cases_need_a_token_and_hide_outcomes() {
    let app = app_in(prepared(), "");
    assert_eq!(call(&app, Method::GET, "/cases", None, None).await.status, StatusCode::UNAUTHORIZED);
    assert_eq!(call(&app, Method::GET, "/cases", Some("nope"), None).await.status, StatusCode::UNAUTHORIZED);
    let v = call(&app, Method::GET, "/cases", Some("tok-d2"), None).await.json();
    let cases = v["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 30);
    let ids: Vec<String> = cases.iter().map(|c| c["case_id"].as_str().unwrap().to_string()).collect();
    assert_eq!(ids, subset_ids(prepared()));
    assert_eq!(cases[0]["tier"], "hard");
    assert_eq!(cases[29]["tier"], "easy");
    let fields = cases[0]["fields"].as_object().unwrap();
    assert_eq!(fields.len(), 30);
    assert!(!fields.contains_key("OUTCOME") && !fields.contains_key("SNOT22_6MO_TOTAL"));
    assert!(fields["SEX"].is_string());
    assert_eq!(v["guidance"]["_case"], "Classify the expected six-month outcome.");
}

#[tokio::test]
async fn label_submit_revise_and_list() {
    let dir = fork();
    let app = app_in(dir.path(), "");
    let case = subset_ids(dir.path())[3].clone();
    let first = call(&app, Method::POST, "/labels", Some("tok-d1"), Some(json!({ "case_id": case, "call": 1, "confidence": 4 }))).await;
    assert_eq!(first.status, StatusCode::CREATED);
    assert_eq!(first.json()["history_length"], 1);
    let second = call(&app, Method::POST, "/labels", Some("tok-d1"), Some(json!({ "case_id": case, "call": 0, "confidence": 2 }))).await;
    let v = second.json();
    assert_eq!(v["history_length"], 2);
    assert_eq!(v["label"]["revision"], 2);

    let list = call(&app, Method::GET, &format!("/labels?case_id={case}"), Some("tok-d1"), None).await.json();
    assert_eq!(list["rater"], "D1");
    let labels = list["labels"].as_array().unwrap();
    assert_eq!(labels.len(), 1);
    assert_eq!(labels[0]["call"], 0);
    assert_eq!(labels[0]["confidence"], 2);
    assert_eq!(labels[0]["history_length"], 2);
    let history = list["history"].as_array().unwrap();
    assert_eq!(history.iter().map(|h| h["call"].as_u64().unwrap()).collect::<Vec<_>>(), [1, 0]);

    // Raters are isolated; the admin may read anyone.
    let other = call(&app, Method::GET, "/labels", Some("tok-d2"), None).await.json();
    assert!(other["labels"].as_array().unwrap().is_empty());
    assert_eq!(call(&app, Method::GET, "/labels?rater=D1", Some("tok-d2"), None).await.status, StatusCode::FORBIDDEN);
    let admin = call(&app, Method::GET, "/labels?rater=D1", Some("admin-secret"), None).await.json();
    assert_eq!(admin["labels"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn label_errors() {
    let dir = fork();
    let app = app_in(dir.path(), "");
    let case = subset_ids(dir.path())[0].clone();
    let post = |token: Option<&'static str>, body: Value| {
        let app = app.clone();
        async move { call(&app, Method::POST, "/labels", token, Some(body)).await }
    };
    let r = post(Some("tok-d1"), json!({ "case_id": case, "call": 1, "confidence": 6 })).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["error"], "MalformedConfidence");
    let r = post(Some("tok-d1"), json!({ "case_id": case, "call": 1, "confidence": 0 })).await;
    assert_eq!(r.json()["error"], "MalformedConfidence");
    let r = post(Some("tok-d1"), json!({ "case_id": "S9999", "call": 1, "confidence": 3 })).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.json()["error"], "UnknownCase");
    let r = post(None, json!({ "case_id": case, "call": 1, "confidence": 3 })).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    let r = post(Some("admin-secret"), json!({ "case_id": case, "call": 1, "confidence": 3 })).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = post(Some("tok-d1"), json!({ "case_id": case, "call": 2, "confidence": 3 })).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    // Nothing above was stored.
    let list = call(&app, Method::GET, "/labels", Some("tok-d1"), None).await.json();
    assert!(list["labels"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn sessions_round_trip_and_guard_access() {
    let dir = fork();
    let app = app_in(dir.path(), "");
    let fresh = call(&app, Method::GET, "/sessions/D1", Some("tok-d1"), None).await.json();
    assert_eq!(fresh["cursor"], 0);
    let case = subset_ids(dir.path())[7].clone();
    let put = call(&app, Method::PUT, "/sessions/D1", Some("tok-d1"), Some(json!({ "cursor": 7, "case_id": case }))).await;
    assert_eq!(put.status, StatusCode::OK);
    let got = call(&app, Method::GET, "/sessions/D1", Some("tok-d1"), None).await.json();
    assert_eq!((got["cursor"].as_u64(), got["case_id"].as_str()), (Some(7), Some(case.as_str())));
    let admin = call(&app, Method::GET, "/sessions/D1", Some("admin-secret"), None).await.json();
    assert_eq!(admin, got);

    let r = call(&app, Method::GET, "/sessions/D9", Some("tok-d1"), None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.json()["error"], "UnknownRater");
    assert_eq!(call(&app, Method::GET, "/sessions/D2", Some("tok-d1"), None).await.status, StatusCode::FORBIDDEN);
    assert_eq!(
        call(&app, Method::PUT, "/sessions/D1", Some("tok-d1"), Some(json!({ "cursor": 31 }))).await.status,
        StatusCode::BAD_REQUEST
    );
    let r = call(&app, Method::PUT, "/sessions/D1", Some("tok-d1"), Some(json!({ "cursor": 1, "case_id": "nope" }))).await;
    assert_eq!(r.json()["error"], "UnknownCase");
}

#[tokio::test]
async fn admin_threshold() {
    let app = app_in(prepared(), "");
    let body = json!({ "record": low_record() });
    let p = call(&app, Method::POST, "/predict", None, Some(body.clone())).await.json()["probability"].as_f64().unwrap();
    let r = call(&app, Method::PUT, "/admin/threshold", Some("tok-d1"), Some(json!({ "threshold": 0.2 }))).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = call(&app, Method::PUT, "/admin/threshold", Some("admin-secret"), Some(json!({ "threshold": 1.0 }))).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["error"], "InvalidThreshold");

    let tau = p / 2.0;
    let r = call(&app, Method::PUT, "/admin/threshold", Some("admin-secret"), Some(json!({ "threshold": tau }))).await;
    assert_eq!(r.json()["threshold"].as_f64(), Some(tau));
    let v = call(&app, Method::POST, "/predict", None, Some(body)).await.json();
    assert_eq!(v["threshold"].as_f64(), Some(tau));
    assert_eq!(v["decision"], 1);
    assert_eq!(v["probability"].as_f64(), Some(p));
    let h = call(&app, Method::GET, "/health", None, None).await.json();
    assert_eq!(h["threshold"].as_f64(), Some(tau));
}
