use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use relabel::api::{router, AnnotationTask, AppState};
use relabel::fixture::{self, AnnotatorModel, Fixture, FixtureConfig};
use relabel::metrics::MoeMode;
use relabel::pipeline::{ingest_fixture, BatchOptions, RunDir};
use relabel::proposals::EmptySetPolicy;
use relabel::ClassId;
use serde_json::{json, Value};
use tower::ServiceExt;

const ADMIN: &str = "admin-secret";

struct Env {
    _tmp: tempfile::TempDir,
    run: RunDir,
    fx: Fixture,
}

fn env() -> Env {
    let tmp = tempfile::tempdir().unwrap();
    let run = RunDir::new(tmp.path().join("run"));
    let fx = fixture::generate(&FixtureConfig {
        n_images: 42,
        n_classes: 25,
        ..FixtureConfig::default()
    });
    let inputs = tmp.path().join("in");
    ingest_fixture(&run, &inputs, &fx).unwrap();
    run.select_model(EmptySetPolicy::Exclude, false).unwrap();
    run.propose(20, false).unwrap();
    run.make_batches(
        &BatchOptions {
            roster: inputs.join("roster.jsonl"),
            num_batches: 7,
            per_batch: 2,
            seed: 1,
        },
        false,
    )
    .unwrap();
    Env { _tmp: tmp, run, fx }
}

impl Env {
    fn state(&self) -> Arc<AppState> {
        Arc::new(self.run.service_state(Some(ADMIN.into())).unwrap())
    }

    fn key(&self, annotator: &str) -> String {
        self.fx
            .roster
            .iter()
            .find(|p| p.annotator_id == annotator)
            .and_then(|p| p.access_key.clone())
            .unwrap()
    }

    fn log_len(&self) -> usize {
        std::fs::read_to_string(self.run.path("events.jsonl"))
            .unwrap_or_default()
            .lines()
            .count()
    }
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    text: String,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_str(&self.text).unwrap_or(Value::Null)
    }
}

async fn call(app: &Router, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    Reply {
        status,
        headers,
        text: String::from_utf8(bytes.to_vec()).unwrap(),
    }
}

async fn login(app: &Router, env: &Env, annotator: &str) -> String {
    let r = call(
        app,
        "POST",
        "/api/login",
        None,
        Some(json!({"annotator_id": annotator, "access_key": env.key(annotator)})),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);
    r.json()["token"].as_str().unwrap().to_owned()
}

fn first_annotator(state: &AppState) -> (String, Vec<String>) {
    let wf = state.workflow();
    let b = &wf.setup().batches[0];
    (b.assigned_annotators[0].clone(), b.image_ids.clone())
}

#[tokio::test]
async fn login_rejects_bad_credentials_and_missing_tokens() {
    let env = env();
    let app = router(env.state());
    let r = call(&app, "POST", "/api/login", None, Some(json!({"annotator_id": "ann00", "access_key": "nope"}))).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    assert_eq!(r.json()["code"], "invalid_credentials");

    let r = call(&app, "GET", "/api/tasks/next", None, None).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    assert_eq!(r.json()["code"], "unauthorized");
    assert!(r.json()["message"].is_string());

    let r = call(&app, "GET", "/api/tasks/next", Some("forged"), None).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);

    let r = call(&app, "POST", "/api/login", None, Some(json!({"annotator_id": 3}))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["code"], "invalid_body");
}

#[tokio::test]
async fn expired_tokens_are_rejected() {
    let env = env();
    let state = Arc::new(
        env.run
            .service_state(None)
            .unwrap()
            .with_session_ttl(chrono::Duration::zero()),
    );
    let app = router(state);
    let token = login(&app, &env, "ann00").await;
    let r = call(&app, "GET", "/api/progress", Some(&token), None).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn task_payload_has_groups_exemplars_and_a_stable_cursor() {
    let env = env();
    let state = env.state();
    let app = router(state.clone());
    let (who, images) = first_annotator(&state);
    let token = login(&app, &env, &who).await;

    let r = call(&app, "GET", "/api/tasks/next", Some(&token), None).await;
    assert_eq!(r.status, StatusCode::OK);
    let task: AnnotationTask = serde_json::from_str(&r.text).unwrap();
    assert_eq!(task.image_id, images[0]);
    assert_eq!(task.image_uri, format!("images/{}.jpg", images[0]));
    assert_eq!(task.groups.len(), 4);
    assert!(task.groups.iter().all(|g| g.len() == 5));
    for entry in task.groups.iter().flatten() {
        assert_eq!(entry.exemplars.len(), 10);
        assert!(!entry.prechecked);
        assert!(!entry.name.is_empty());
    }
    let total = state.workflow().progress(&who).total;
    assert_eq!((task.progress.done, task.progress.total), (0, total));

    let again = call(&app, "GET", "/api/tasks/next", Some(&token), None).await;
    assert_eq!(again.text, r.text);
}

#[tokio::test]
async fn submissions_are_validated_and_idempotent() {
    let env = env();
    let state = env.state();
    let app = router(state.clone());
    let (who, images) = first_annotator(&state);
    let token = login(&app, &env, &who).await;
    let task: AnnotationTask = call(&app, "GET", "/api/tasks/next", Some(&token), None).await.json().try_into_task();
    let picks: Vec<u32> = task.groups[0].iter().take(2).map(|e| e.class_id.0).collect();

    let before = env.log_len();
    let body = json!({"image_id": task.image_id, "labels": picks});
    let r = call(&app, "POST", "/api/annotations", Some(&token), Some(body.clone())).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);
    assert_eq!(r.json()["revision"], 1);
    assert_eq!(env.log_len(), before + 1);

    let r = call(&app, "POST", "/api/annotations", Some(&token), Some(body)).await;
    assert_eq!((r.json()["revision"].clone(), r.json()["created"].clone()), (json!(1), json!(false)));
    assert_eq!(env.log_len(), before + 1);

    let r = call(&app, "POST", "/api/annotations", Some(&token), Some(json!({"image_id": task.image_id, "labels": [picks[0]]}))).await;
    assert_eq!(r.json()["revision"], 2);

    let proposed: BTreeSet<u32> = task.groups.iter().flatten().map(|e| e.class_id.0).collect();
    let outside = (0..25).find(|c| !proposed.contains(c)).unwrap();
    let r = call(&app, "POST", "/api/annotations", Some(&token), Some(json!({"image_id": task.image_id, "labels": [outside]}))).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["code"], "label_not_proposed");
    assert_eq!(r.json()["field"], "labels");

    let foreign = state.workflow().setup().batches[1].image_ids[0].clone();
    let r = call(&app, "POST", "/api/annotations", Some(&token), Some(json!({"image_id": foreign, "labels": []}))).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    assert_eq!(r.json()["code"], "not_assigned");

    let next: AnnotationTask = call(&app, "GET", "/api/tasks/next", Some(&token), None).await.json().try_into_task();
    assert_eq!(next.image_id, images[1]);
    assert_eq!(next.progress.done, 1);
}

trait IntoTask {
    fn try_into_task(self) -> AnnotationTask;
}

impl IntoTask for Value {
    fn try_into_task(self) -> AnnotationTask {
        serde_json::from_value(self).expect("task payload")
    }
}

#[tokio::test]
async fn state_survives_a_restart() {
    let env = env();
    let (who, next_before) = {
        let state = env.state();
        let app = router(state.clone());
        let (who, _) = first_annotator(&state);
        let token = login(&app, &env, &who).await;
        for _ in 0..3 {
            let task = call(&app, "GET", "/api/tasks/next", Some(&token), None).await.json().try_into_task();
            call(&app, "POST", "/api/annotations", Some(&token), Some(json!({"image_id": task.image_id, "labels": []}))).await;
        }
        let next = call(&app, "GET", "/api/tasks/next", Some(&token), None).await.text;
        (who, next)
    };
    let app = router(env.state());
    let token = login(&app, &env, &who).await;
    let next_after = call(&app, "GET", "/api/tasks/next", Some(&token), None).await.text;
    assert_eq!(next_before, next_after);
}

#[tokio::test]
async fn exemplars_and_progress() {
    let env = env();
    let app = router(env.state());
    let token = login(&app, &env, "ann00").await;
    let r = call(&app, "GET", "/api/labels/3/exemplars", Some(&token), None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["exemplars"].as_array().unwrap().len(), 10);
    assert_eq!(r.json()["class_id"], 3);
    let r = call(&app, "GET", "/api/labels/999/exemplars", Some(&token), None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    let r = call(&app, "GET", "/api/progress", Some(&token), None).await;
    assert_eq!(r.json()["annotator_id"], "ann00");
    assert_eq!(r.json()["phase"], "initial");
    let r = call(&app, "GET", "/api/progress", Some(ADMIN), None).await;
    assert_eq!(r.json()["annotators"].as_array().unwrap().len(), env.fx.roster.len());
}

#[tokio::test]
async fn stage_control_refinement_triage_and_reports() {
    let env = env();
    let state = env.state();
    let app = router(state.clone());
    let (who, _) = first_annotator(&state);
    let token = login(&app, &env, &who).await;

    let r = call(&app, "POST", "/api/admin/stage", Some(&token), Some(json!({"to": "analysis"}))).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = call(&app, "GET", "/api/reports/heatmap", Some(&token), None).await;
    assert_eq!((r.status, r.json()["code"].clone()), (StatusCode::CONFLICT, json!("not_ready")));
    let r = call(&app, "GET", "/api/reports/bogus", Some(&token), None).await;
    assert_eq!((r.status, r.json()["code"].clone()), (StatusCode::NOT_FOUND, json!("unknown_kind")));

    let truth = env
        .fx
        .truth
        .iter()
        .map(|g| (g.image_id.clone(), g.label_set.clone()))
        .collect();
    fixture::simulate_stage(&mut state.workflow(), &truth, AnnotatorModel::with_error_rate(0.2), 3).unwrap();

    let r = call(&app, "POST", "/api/admin/stage", Some(ADMIN), Some(json!({"to": "analysis"}))).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);
    assert_eq!(r.json()["phase"], "analysis");
    let log = env.log_len();
    let r = call(&app, "POST", "/api/admin/stage", Some(ADMIN), Some(json!({"to": "analysis"}))).await;
    assert_eq!(r.json()["changed"], false);
    assert_eq!(env.log_len(), log);

    let task = call(&app, "GET", "/api/tasks/next", Some(&token), None).await;
    assert_eq!(task.status, StatusCode::NO_CONTENT);
    let image = state.workflow().setup().batches[0].image_ids[0].clone();
    let r = call(&app, "POST", "/api/annotations", Some(&token), Some(json!({"image_id": image, "labels": []}))).await;
    assert_eq!((r.status, r.json()["code"].clone()), (StatusCode::CONFLICT, json!("stale_stage")));

    let r = call(&app, "POST", "/api/admin/stage", Some(ADMIN), Some(json!({"to": "final"}))).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    let r = call(&app, "POST", "/api/admin/stage", Some(ADMIN), Some(json!({"to": "refinement"}))).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);
    let slices = r.json()["refinement_slices"].clone();
    let (refiner, slice) = slices.as_object().unwrap().iter().next().unwrap();
    assert!(!slice.as_array().unwrap().is_empty());

    let rtoken = login(&app, &env, refiner).await;
    let task = call(&app, "GET", "/api/tasks/next", Some(&rtoken), None).await.json().try_into_task();
    let expected = state.workflow().refinement_presentation(&task.image_id).unwrap();
    let prechecked: BTreeSet<ClassId> = task.groups.iter().flatten().filter(|e| e.prechecked).map(|e| e.class_id).collect();
    assert_eq!(prechecked, expected.prechecked);
    assert_eq!(task.progress.total, slice.as_array().unwrap().len());

    let edited: Vec<u32> = task.groups.iter().flatten().filter(|e| !e.prechecked).take(1).map(|e| e.class_id.0).collect();
    let body = json!({"image_id": task.image_id, "labels": edited, "stage": "refinement"});
    let r = call(&app, "POST", "/api/annotations", Some(&rtoken), Some(body.clone())).await;
    assert_eq!((r.status, r.json()["field"].clone()), (StatusCode::UNPROCESSABLE_ENTITY, json!("comment")));
    let mut with_comment = body;
    with_comment["comment"] = json!("second object visible");
    let r = call(&app, "POST", "/api/annotations", Some(&rtoken), Some(with_comment)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);

    fixture::simulate_stage(&mut state.workflow(), &truth, AnnotatorModel::with_error_rate(0.2), 3).unwrap();
    let r = call(&app, "POST", "/api/admin/stage", Some(ADMIN), Some(json!({"to": "final"}))).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);

    let experienced = state.workflow().experienced_annotators()[0].clone();
    let etoken = login(&app, &env, &experienced).await;
    let finals = state.workflow().final_labels().unwrap();
    let nonempty = finals.iter().find(|g| !g.label_set.is_empty()).unwrap().image_id.clone();
    let triage = |id: &str| json!({"image_id": id, "quality_category": "no_valid_proposal", "gt_stance": "agree"});
    let r = call(&app, "POST", "/api/triage", Some(&etoken), Some(triage(&nonempty))).await;
    assert_eq!((r.status, r.json()["code"].clone()), (StatusCode::CONFLICT, json!("triage_not_eligible")));
    let r = call(&app, "POST", "/api/triage", Some(&token), Some(triage(&nonempty))).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    if let Some(empty) = finals.iter().find(|g| g.label_set.is_empty()) {
        let r = call(&app, "POST", "/api/triage", Some(&etoken), Some(triage(&empty.image_id))).await;
        assert_eq!(r.json()["created"], true);
        let r = call(&app, "POST", "/api/triage", Some(&etoken), Some(triage(&empty.image_id))).await;
        assert_eq!(r.json()["created"], false);
    }
    drop(app);
    drop(state);

    env.run.analyze_agreement(false).unwrap();
    env.run.assign_refinement(None, false).unwrap();
    env.run.finalize(false).unwrap();
    env.run.report(MoeMode::Wald, EmptySetPolicy::Exclude, false).unwrap();

    let app = router(env.state());
    let token = login(&app, &env, &who).await;
    let r = call(&app, "GET", "/api/reports/label_distribution", Some(&token), None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["n_total"], 42);
    assert!(r.headers.contains_key("x-run-id"));
    let r = call(&app, "GET", "/api/reports/heatmap?model=model_00", Some(&token), None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers["content-type"], "text/csv; charset=utf-8");
    let rows: Vec<&str> = r.text.lines().collect();
    assert_eq!(rows[0], "model_id,label_count,n,accuracy,half_width");
    assert!(rows.len() > 1 && rows[1..].iter().all(|l| l.starts_with("model_00,")));
    let r = call(&app, "GET", "/api/reports/heatmap?model=nope", Some(&token), None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}
