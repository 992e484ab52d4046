use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dtameta::service::{app, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const CSV: &str = include_str!("../data/example_synthetic.csv");

async fn call(router: &Router, method: &str, uri: &str, body: impl Into<Body>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(body.into()).unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(router: &Router, method: &str, uri: &str, body: impl Into<Body>) -> (StatusCode, Value) {
    let (s, b) = call(router, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn quick_config() -> Value {
    json!({"model": "bivariate", "sampler": {"chains": 2, "warmup": 300, "samples": 300, "seed": 11}})
}

async fn upload(router: &Router) -> String {
    let (s, v) = call_json(router, "POST", "/api/datasets", CSV).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v["dataset_id"].as_str().unwrap().to_string()
}

async fn submit(router: &Router, dataset_id: &str, config: Value) -> (StatusCode, Value) {
    let body = json!({"dataset_id": dataset_id, "config": config}).to_string();
    call_json(router, "POST", "/api/jobs", body).await
}

/// Polls until the job leaves the queue, returning every observed progress fraction.
async fn wait_done(router: &Router, id: &str) -> (Value, Vec<f64>) {
    let mut fractions = Vec::new();
    for _ in 0..1200 {
        let (s, v) = call_json(router, "GET", &format!("/api/jobs/{id}"), Body::empty()).await;
        assert_eq!(s, StatusCode::OK);
        if let Some(f) = v["progress"]["fraction"].as_f64() {
            fractions.push(f);
        }
        if v["state"] == "done" || v["state"] == "failed" {
            return (v, fractions);
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    panic!("job {id} did not finish");
}

fn service(dir: &std::path::Path) -> Router {
    let mut cfg = ServiceConfig::new(dir);
    cfg.workers = 1;
    cfg.max_upload = 64 * 1024;
    app(&cfg).unwrap().0
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_dataset_upload() {
    let dir = tempfile::tempdir().unwrap();
    let r = service(dir.path());
    let (s, v) = call_json(&r, "GET", "/api/health", Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");

    let a = upload(&r).await;
    let b = upload(&r).await;
    assert_eq!(a, b, "same content gives the same id");

    let bad = "author,year,tp,fp,fn,tn\nS1,1991,1,x,1,1\n";
    let (s, v) = call_json(&r, "POST", "/api/datasets", bad).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["details"]["row"], 1);
    assert_eq!(v["details"]["column"], 4);

    let huge = "x".repeat(65 * 1024);
    let (s, _) = call(&r, "POST", "/api/datasets", huge).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test(flavor = "multi_thread")]
async fn job_submission_errors() {
    let dir = tempfile::tempdir().unwrap();
    let r = service(dir.path());
    let ds = upload(&r).await;

    let (s, v) = submit(&r, "feed", quick_config()).await;
    assert_eq!(s, StatusCode::NOT_FOUND, "{v}");

    let (s, _) = submit(&r, &ds, json!({"model": "bivariate", "sampler": {"chains": 0}})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = submit(&r, &ds, json!({"model": "metareg", "covariate": "nope"})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = submit(&r, &ds, json!({"model": "bivariate", "exclude": ["Nobody"]})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = call(&r, "POST", "/api/jobs", "{not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = call(&r, "GET", "/api/jobs/missing", Body::empty()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn job_runs_to_completion_with_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let r = service(dir.path());
    let ds = upload(&r).await;
    let (s, v) = submit(&r, &ds, quick_config()).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let id = v["job_id"].as_str().unwrap().to_string();

    let (s, _) = call(&r, "GET", &format!("/api/jobs/{id}/result"), Body::empty()).await;
    assert!(s == StatusCode::CONFLICT || s == StatusCode::OK);

    let (job, fractions) = wait_done(&r, &id).await;
    assert_eq!(job["state"], "done", "{job}");
    assert!(fractions.windows(2).all(|w| w[0] <= w[1]), "progress went backwards: {fractions:?}");
    assert_eq!(job["progress"]["fraction"], 1.0);

    let (s, body) = call(&r, "GET", &format!("/api/jobs/{id}/result"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    let stored = std::fs::read(dir.path().join("jobs").join(&id).join("result.json")).unwrap();
    assert_eq!(stored, body);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["analysis"], "bivariate");

    let (s, svg) = call(&r, "GET", &format!("/api/jobs/{id}/scene?kind=sroc&format=svg"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8(svg).unwrap().contains("<svg"));

    let (s, scene) = call_json(&r, "GET", &format!("/api/jobs/{id}/scene?kind=sroc&show_prediction=false"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(scene["points"].as_array().unwrap().len(), 14);

    let (s, forest) = call_json(&r, "GET", &format!("/api/jobs/{id}/scene?kind=forest&order=by_year"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK, "{forest}");

    let (s, tree) = call_json(&r, "GET", &format!("/api/jobs/{id}/scene?kind=tree&n=1000&prev=0.2"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK, "{tree}");

    let (s, _) = call(&r, "GET", &format!("/api/jobs/{id}/scene?kind=pie"), Body::empty()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&r, "GET", &format!("/api/jobs/{id}/scene?format=png"), Body::empty()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = call(&r, "DELETE", &format!("/api/jobs/{id}"), Body::empty()).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = call(&r, "GET", &format!("/api/jobs/{id}"), Body::empty()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn jobs_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, id) = {
        let r = service(dir.path());
        let ds = upload(&r).await;
        let (_, v) = submit(&r, &ds, quick_config()).await;
        let id = v["job_id"].as_str().unwrap().to_string();
        wait_done(&r, &id).await;
        (ds, id)
    };
    let r = service(dir.path());
    let (s, v) = call_json(&r, "GET", &format!("/api/jobs/{id}"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["state"], "done");
    assert_eq!(v["dataset_id"], ds.as_str());
    let (s, _) = call(&r, "GET", &format!("/api/jobs/{id}/result"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
}
