mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use namedis::active::{ActiveConfig, QueryMode};
use namedis::dpgmm::{estimate_hyperparams, HyperConfig};
use namedis::pipeline::{prepare, Embedder, PrepareOptions};
use namedis::records::RawRecord;
use namedis::session::{Session, SessionConfig};
use namedis_cli::service::{router, AppState, ServiceOptions};

struct Fixture {
    state: Arc<AppState>,
    stream: Vec<RawRecord>,
}

fn fixture(tau: f64, timeout: Duration, snapshot: Option<std::path::PathBuf>) -> Fixture {
    let records = common::records();
    let opts = PrepareOptions {
        h: 3,
        ..Default::default()
    };
    let p = prepare(&records, &opts).unwrap();
    let xs: Vec<_> = p.train.iter().map(|r| r.vector()).collect();
    let labels: Vec<String> = p.train.iter().map(|r| r.label.clone().unwrap()).collect();
    let hyper = estimate_hyperparams(&xs, &labels, &HyperConfig::default()).unwrap();
    let config = SessionConfig {
        particles: 20,
        seed: 1,
        active: ActiveConfig {
            tau,
            budget: None,
            mode: QueryMode::Interactive,
        },
        ..Default::default()
    };
    let session = Session::new(config, hyper, &xs, &labels).unwrap();
    let embedder = Embedder {
        vocabulary: p.vocabulary,
        basis: p.basis,
        nnls: opts.nnls,
    };
    let stream = records
        .into_iter()
        .filter(|r| p.manifest.test_ids.contains(&r.id))
        .collect();
    let options = ServiceOptions {
        query_timeout: timeout,
        snapshot,
    };
    Fixture {
        state: AppState::new(session, embedder, options),
        stream,
    }
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn post_record(state: &Arc<AppState>, r: &RawRecord) -> (StatusCode, Value) {
    call(state, "POST", "/records", Some(serde_json::to_string(r).unwrap())).await
}

#[tokio::test]
async fn no_query_when_threshold_is_one() {
    let f = fixture(1.0, Duration::from_secs(300), None);
    for r in f.stream.iter().take(4) {
        let (status, body) = post_record(&f.state, r).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert!(body.get("query").is_none());
        let total: f64 = body["posterior"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| m["mass"].as_f64().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    let (_, pending) = call(&f.state, "GET", "/queries", None).await;
    assert!(pending["pending"].is_null());
    let (_, metrics) = call(&f.state, "GET", "/metrics", None).await;
    assert_eq!(metrics["processed"], 4);
    assert_eq!(metrics["queries"], 0);
}

#[tokio::test]
async fn query_round_trip() {
    let f = fixture(0.0, Duration::from_secs(300), None);
    let r = &f.stream[0];
    let (status, body) = post_record(&f.state, r).await;
    assert_eq!(status, StatusCode::OK);
    let query = &body["query"];
    assert_eq!(query["record_id"], r.id.as_str());

    let (_, pending) = call(&f.state, "GET", "/queries", None).await;
    let view = &pending["pending"];
    assert_eq!(view["index"], 0);
    assert_eq!(view["record"]["title"], r.title.as_str());
    // candidate masses are the posterior the record response reported
    let posterior: Vec<(String, f64)> = body["posterior"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| (m["label"].as_str().unwrap().to_string(), m["mass"].as_f64().unwrap()))
        .collect();
    for c in view["candidates"].as_array().unwrap() {
        let label = c["label"].as_str().unwrap();
        let mass = posterior.iter().find(|(l, _)| l == label).unwrap().1;
        assert_eq!(c["mass"].as_f64().unwrap(), mass);
    }

    let truth = r.true_label.clone().unwrap();
    let label = json!({ "index": 0, "label": truth }).to_string();
    let (status, _) = call(&f.state, "POST", "/labels", Some(label.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let (status, err) = call(&f.state, "POST", "/labels", Some(label)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["kind"], "stale-query");

    let (_, pending) = call(&f.state, "GET", "/queries", None).await;
    assert!(pending["pending"].is_null());
    let (_, metrics) = call(&f.state, "GET", "/metrics", None).await;
    assert_eq!(metrics["answered"], 1);
    assert!(metrics["pending"].is_null());
    assert_eq!(f.state.session().entries()[0].label, truth);
}

#[tokio::test]
async fn record_waits_for_pending_query() {
    let f = fixture(0.0, Duration::from_secs(300), None);
    post_record(&f.state, &f.stream[0]).await;
    let state = f.state.clone();
    let second = f.stream[1].clone();
    let waiting = tokio::spawn(async move { post_record(&state, &second).await });
    tokio::time::sleep(Duration::from_millis(100)).await;
    assert!(!waiting.is_finished(), "the second record must wait for the label");
    assert_eq!(f.state.session().processed(), 1);

    let label = json!({ "index": 0, "label": "someone new" }).to_string();
    assert_eq!(call(&f.state, "POST", "/labels", Some(label)).await.0, StatusCode::OK);
    let (status, body) = tokio::time::timeout(Duration::from_secs(5), waiting)
        .await
        .unwrap()
        .unwrap();
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["index"], 1);
}

#[tokio::test]
async fn pending_query_times_out() {
    let f = fixture(0.0, Duration::from_millis(150), None);
    let (_, first) = post_record(&f.state, &f.stream[0]).await;
    let predicted = first["prediction"].as_str().unwrap().to_string();
    let (status, body) = tokio::time::timeout(Duration::from_secs(5), post_record(&f.state, &f.stream[1]))
        .await
        .unwrap();
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["index"], 1);
    let s = f.state.session();
    assert_eq!(s.entries()[0].label, predicted);
    let m = s.metrics();
    assert_eq!(m.skipped, 1);
    assert_eq!(m.pending, Some(1));

    let late = json!({ "index": 0, "label": "A" }).to_string();
    assert_eq!(
        call(&f.state, "POST", "/labels", Some(late)).await.0,
        StatusCode::CONFLICT
    );
}

#[tokio::test]
async fn rejects_bad_requests() {
    let f = fixture(1.0, Duration::from_secs(300), None);
    let (status, err) = call(&f.state, "POST", "/records", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["kind"], "malformed");

    let mut r = f.stream[0].clone();
    r.year = 0;
    assert_eq!(post_record(&f.state, &r).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    assert_eq!(post_record(&f.state, &f.stream[0]).await.0, StatusCode::OK);
    let (status, err) = post_record(&f.state, &f.stream[0]).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["kind"], "duplicate");

    let label = json!({ "index": 0, "label": "A" }).to_string();
    assert_eq!(
        call(&f.state, "POST", "/labels", Some(label)).await.0,
        StatusCode::CONFLICT
    );
    assert_eq!(
        call(&f.state, "POST", "/labels", Some("[]".into())).await.0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        call(&f.state, "POST", "/snapshot", None).await.0,
        StatusCode::BAD_REQUEST
    );
}

#[tokio::test]
async fn model_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snap.json");
    let f = fixture(1.0, Duration::from_secs(300), Some(path.clone()));
    for r in f.stream.iter().take(3) {
        post_record(&f.state, r).await;
    }
    let (status, model) = call(&f.state, "GET", "/model", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(model["processed"], 3);
    assert_eq!(model["particles"], 20);

    let (status, body) = call(&f.state, "POST", "/snapshot", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["processed"], 3);
    let restored = Session::load(&path).unwrap();
    assert_eq!(restored.entries(), f.state.session().entries());
}
