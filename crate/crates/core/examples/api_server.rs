//! Prepare a run directory and exercise the annotation service in process.
//! Pass `--serve` to keep it listening on 127.0.0.1:8080 afterwards.
//!
//! cargo run --example api_server [-- --serve]

use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use relabel::api::{router, serve};
use relabel::fixture::{generate, FixtureConfig};
use relabel::pipeline::{ingest_fixture, BatchOptions, RunDir};
use relabel::proposals::EmptySetPolicy;
use tower::ServiceExt;

async fn send(app: &axum::Router, req: Request<Body>) -> String {
    let resp = app.clone().oneshot(req).await.expect("infallible router");
    let status = resp.status();
    let body = resp.into_body().collect().await.expect("body").to_bytes();
    format!("{status} {}", String::from_utf8_lossy(&body))
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let run = RunDir::new(tmp.path().join("run"));
    let fx = generate(&FixtureConfig {
        n_classes: 30,
        ..FixtureConfig::default()
    });
    ingest_fixture(&run, &tmp.path().join("in"), &fx)?;
    run.select_model(EmptySetPolicy::Exclude, false)?;
    run.propose(20, false)?;
    run.make_batches(
        &BatchOptions {
            roster: tmp.path().join("in/roster.jsonl"),
            num_batches: 7,
            per_batch: 2,
            seed: 0,
        },
        false,
    )?;

    let state = Arc::new(run.service_state(Some("admin-key".into()))?);
    let app = router(state);
    let login = send(
        &app,
        Request::post("/api/login")
            .header("content-type", "application/json")
            .body(Body::from(r#"{"annotator_id":"ann00","access_key":"key-ann00"}"#))?,
    )
    .await;
    println!("POST /api/login -> {login}");
    let token = login
        .split("\"token\":\"")
        .nth(1)
        .and_then(|s| s.split('"').next())
        .expect("token in login response")
        .to_owned();
    let task = send(
        &app,
        Request::get("/api/tasks/next")
            .header("authorization", format!("Bearer {token}"))
            .body(Body::empty())?,
    )
    .await;
    println!("GET /api/tasks/next -> {}...", &task[..task.len().min(300)]);
    let report = send(
        &app,
        Request::get("/api/reports/heatmap")
            .header("authorization", format!("Bearer {token}"))
            .body(Body::empty())?,
    )
    .await;
    println!("GET /api/reports/heatmap -> {report}");

    if std::env::args().any(|a| a == "--serve") {
        let state = run.service_state(Some("admin-key".into()))?;
        serve(state, "127.0.0.1:8080".parse()?).await?;
    }
    Ok(())
}
