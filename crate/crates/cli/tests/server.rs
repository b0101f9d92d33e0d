use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use hilplan::config::RunConfig;
use hilplan::exec::Exec;
use hilplan::service::{CandidateView, HistoryView, SessionStore, Status};
use hilplan_cli::server::{router, ErrorBody};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

fn base() -> RunConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg");
    RunConfig::load(&path).unwrap()
}

async fn call<T: DeserializeOwned>(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, T) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let parsed = serde_json::from_slice(&bytes)
        .unwrap_or_else(|e| panic!("{status}: {e}: {}", String::from_utf8_lossy(&bytes)));
    (status, parsed)
}

fn aggregate(nonce: &str, f: f64) -> Value {
    json!({ "nonce": nonce, "feedback": { "kind": "aggregate", "satisfaction": f } })
}

#[tokio::test]
async fn round_trip_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(SessionStore::open(dir.path(), Exec::Sequential).unwrap());
    let app = router(store, base());

    let (status, v): (_, CandidateView) =
        call(&app, "POST", "/v1/sessions", Some(json!({ "mode": "supervised", "n_query": 3 }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v.schema_version, 1);
    assert_eq!(v.query_index, Some(0));
    assert_eq!(v.workspace.obstacles.len(), 2);
    let id = v.session_id.clone();

    let (_, again): (_, CandidateView) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(again, v);

    let nonce = v.nonce.clone().unwrap();
    let itemized = json!({ "nonce": nonce, "feedback": { "kind": "itemized", "complaints": 1, "ratings": [2, 0] } });
    let (status, next): (_, CandidateView) =
        call(&app, "POST", &format!("/v1/sessions/{id}/feedback"), Some(itemized)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(next.query_index, Some(1));
    assert_ne!(next.trajectory, v.trajectory);

    let (status, err): (_, ErrorBody) =
        call(&app, "POST", &format!("/v1/sessions/{id}/feedback"), Some(aggregate(&nonce, 1.0))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err.error, "stale_nonce");

    let bad = json!({ "nonce": next.nonce, "feedback": { "kind": "itemized", "complaints": 0, "ratings": [9] } });
    let (status, _): (_, ErrorBody) = call(&app, "POST", &format!("/v1/sessions/{id}/feedback"), Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (_, h): (_, HistoryView) = call(&app, "GET", &format!("/v1/sessions/{id}/history"), None).await;
    assert_eq!(h.records.len(), 2);
    assert_eq!(h.records[0].satisfaction, Some(3.0));

    // a restarted server resumes with the same pending candidate
    let store = Arc::new(SessionStore::open(dir.path(), Exec::Sequential).unwrap());
    let app = router(store, base());
    let (_, resumed): (_, CandidateView) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(resumed, next);

    let mut v = resumed;
    while v.status == Status::Pending {
        let (status, n): (_, CandidateView) = call(
            &app,
            "POST",
            &format!("/v1/sessions/{id}/feedback"),
            Some(aggregate(v.nonce.as_ref().unwrap(), 2.0)),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        v = n;
    }
    assert_eq!(v.status, Status::Complete);
    let (status, err): (_, ErrorBody) =
        call(&app, "POST", &format!("/v1/sessions/{id}/feedback"), Some(aggregate("x", 1.0))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err.error, "complete");
}

#[tokio::test]
async fn unknown_sessions_and_bad_configs() {
    let app = router(Arc::new(SessionStore::in_memory(Exec::Sequential)), base());
    let (status, err): (_, ErrorBody) = call(&app, "GET", "/v1/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err.error, "unknown_session");
    let (status, _): (_, ErrorBody) = call(&app, "GET", "/v1/sessions/nope/history", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    for body in [json!({ "kappa": 1 }), json!({ "mode": "bogus" })] {
        let (status, err): (_, ErrorBody) = call(&app, "POST", "/v1/sessions", Some(body)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(err.error, "invalid");
    }
    let (status, _): (_, ErrorBody) =
        call(&app, "POST", "/v1/sessions/nope/feedback", Some(json!({ "nonce": 3 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}
