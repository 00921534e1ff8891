//! HTTP/JSON service for the annotation frontend.
//!
//! Annotators log in with an operator-provisioned access key and receive a
//! bearer token. An operator holding the admin key drives stage transitions.
//! Every error body is `{code, message, field?}`.
//!
//! | method | path | auth |
//! |---|---|---|
//! | POST | `/api/login` | none |
//! | GET | `/api/tasks/next` | annotator |
//! | POST | `/api/annotations` | annotator |
//! | GET | `/api/labels/{class_id}/exemplars` | any |
//! | POST | `/api/triage` | annotator |
//! | GET | `/api/reports/{kind}` | any |
//! | POST | `/api/admin/stage` | admin |
//! | GET | `/api/progress` | any |
//!
//! Writes are serialized through one lock around the workflow so the event
//! log keeps a single gap-free sequence; each accepted write is fsynced
//! before the response is sent. Reports are read from disk without touching
//! the lock.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::catalog::{ClassCatalog, ClassId, ImageRegistry};
use crate::workflow::{GtStance, Phase, QualityCategory, Stage, Submission, TriageRecord, Workflow, WorkflowError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status: status.as_u16(),
            code: code.to_owned(),
            message: message.into(),
            field: None,
        }
    }

    fn field(mut self, field: &str) -> Self {
        self.field = Some(field.to_owned());
        self
    }

    fn unauthorized() -> Self {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing, unknown or expired token")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<WorkflowError> for ApiError {
    fn from(e: WorkflowError) -> Self {
        use WorkflowError as W;
        let msg = e.to_string();
        let (status, code, field) = match &e {
            W::UnknownAnnotator(_) => (StatusCode::NOT_FOUND, "unknown_annotator", Some("annotator_id")),
            W::UnknownImage(_) => (StatusCode::NOT_FOUND, "unknown_image", Some("image_id")),
            W::NotAssigned { .. } => (StatusCode::FORBIDDEN, "not_assigned", Some("image_id")),
            W::StaleStage { .. } => (StatusCode::CONFLICT, "stale_stage", Some("stage")),
            W::LabelNotProposed { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "label_not_proposed", Some("labels")),
            W::MissingComment => (StatusCode::UNPROCESSABLE_ENTITY, "comment_required", Some("comment")),
            W::NotExperienced(_) => (StatusCode::FORBIDDEN, "not_experienced", None),
            W::NotEnoughAnnotators { .. } | W::NoRefiners => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_refiners", Some("refiners"))
            }
            W::TriageNotEligible(_) => (StatusCode::CONFLICT, "triage_not_eligible", Some("image_id")),
            W::NotQueued(_)
            | W::NotComplete(_)
            | W::InvalidTransition { .. }
            | W::RefinementNotAssigned
            | W::RefinementAlreadyAssigned
            | W::IncompleteRefinement(_) => (StatusCode::CONFLICT, "invalid_state", None),
            W::DuplicateAnnotator(_)
            | W::ZeroBatches
            | W::ZeroPerBatch
            | W::Setup(_)
            | W::Log(_)
            | W::Replay { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "internal", None),
        };
        let mut err = ApiError::new(status, code, msg);
        err.field = field.map(str::to_owned);
        err
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", r.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionToken {
    pub annotator_id: String,
    pub token: String,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

pub const DEFAULT_SESSION_TTL_HOURS: i64 = 12;

/// Shared service state.
pub struct AppState {
    workflow: Mutex<Workflow>,
    catalog: ClassCatalog,
    registry: ImageRegistry,
    admin_key: Option<String>,
    sessions: RwLock<HashMap<String, SessionToken>>,
    session_ttl: Duration,
    run_root: Option<PathBuf>,
    run_id: Option<String>,
}

impl AppState {
    pub fn new(workflow: Workflow, catalog: ClassCatalog, registry: ImageRegistry) -> Self {
        AppState {
            workflow: Mutex::new(workflow),
            catalog,
            registry,
            admin_key: None,
            sessions: RwLock::new(HashMap::new()),
            session_ttl: Duration::hours(DEFAULT_SESSION_TTL_HOURS),
            run_root: None,
            run_id: None,
        }
    }

    pub fn with_admin_key(mut self, key: Option<String>) -> Self {
        self.admin_key = key.filter(|k| !k.is_empty());
        self
    }

    pub fn with_session_ttl(mut self, ttl: Duration) -> Self {
        self.session_ttl = ttl;
        self
    }

    /// Serves reports from `root`, a pipeline run directory.
    pub fn with_reports(mut self, root: PathBuf, run_id: Option<String>) -> Self {
        self.run_root = Some(root);
        self.run_id = run_id;
        self
    }

    /// Direct access for embedding and tests.
    pub fn workflow(&self) -> parking_lot::MutexGuard<'_, Workflow> {
        self.workflow.lock()
    }
}

enum Principal {
    Annotator(String),
    Admin,
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn principal(state: &AppState, headers: &HeaderMap) -> ApiResult<Principal> {
    let token = bearer(headers).ok_or_else(ApiError::unauthorized)?;
    if state.admin_key.as_deref() == Some(token) {
        return Ok(Principal::Admin);
    }
    let session = state.sessions.read().get(token).cloned();
    match session {
        Some(s) if s.expires_at > Utc::now() => Ok(Principal::Annotator(s.annotator_id)),
        Some(_) => {
            state.sessions.write().remove(token);
            Err(ApiError::unauthorized())
        }
        None => Err(ApiError::unauthorized()),
    }
}

fn annotator(state: &AppState, headers: &HeaderMap) -> ApiResult<String> {
    match principal(state, headers)? {
        Principal::Annotator(id) => Ok(id),
        Principal::Admin => Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "annotator_only",
            "this endpoint needs an annotator session",
        )),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/login", post(login))
        .route("/api/tasks/next", get(next_task))
        .route("/api/annotations", post(post_annotation))
        .route("/api/labels/{class_id}/exemplars", get(exemplars))
        .route("/api/triage", post(post_triage))
        .route("/api/reports/{kind}", get(get_report))
        .route("/api/admin/stage", post(admin_stage))
        .route("/api/progress", get(progress))
        .with_state(state)
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug, Deserialize)]
pub struct LoginRequest {
    pub annotator_id: String,
    pub access_key: String,
}

async fn login(
    State(state): State<Arc<AppState>>,
    body: Result<Json<LoginRequest>, JsonRejection>,
) -> ApiResult<Json<SessionToken>> {
    let Json(req) = body?;
    let known = {
        let wf = state.workflow.lock();
        wf.annotator(&req.annotator_id).and_then(|p| p.access_key.clone())
    };
    if known.as_deref() != Some(req.access_key.as_str()) {
        return Err(ApiError::new(
            StatusCode::UNAUTHORIZED,
            "invalid_credentials",
            "unknown annotator or wrong access key",
        ));
    }
    let mut bytes = [0u8; 32];
    rand::rng().fill_bytes(&mut bytes);
    let issued_at = Utc::now();
    let session = SessionToken {
        annotator_id: req.annotator_id,
        token: hex::encode(bytes),
        issued_at,
        expires_at: issued_at + state.session_ttl,
    };
    state.sessions.write().insert(session.token.clone(), session.clone());
    Ok(Json(session))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub class_id: ClassId,
    pub name: String,
    pub synonyms: Vec<String>,
    pub exemplars: Vec<String>,
    pub prechecked: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskProgress {
    pub done: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub image_id: String,
    pub image_uri: String,
    pub stage: Stage,
    pub groups: Vec<Vec<TaskEntry>>,
    pub progress: TaskProgress,
}

fn build_task(state: &AppState, wf: &Workflow, annotator_id: &str) -> ApiResult<Option<AnnotationTask>> {
    let Some((image_id, stage)) = wf.next_task(annotator_id) else {
        return Ok(None);
    };
    let (proposals, prechecked) = match stage {
        Stage::Initial => (
            wf.proposals_for(&image_id).cloned().expect("batched images have proposals"),
            BTreeSet::new(),
        ),
        Stage::Refinement => {
            let p = wf.refinement_presentation(&image_id)?;
            (p.proposals, p.prechecked)
        }
    };
    let groups = proposals
        .groups()
        .into_iter()
        .map(|g| {
            g.iter()
                .map(|&c| {
                    let entry = state.catalog.get(c).expect("proposals use catalog classes");
                    TaskEntry {
                        class_id: c,
                        name: entry.name.clone(),
                        synonyms: entry.synonyms.clone(),
                        exemplars: entry.exemplar_refs.clone(),
                        prechecked: prechecked.contains(&c),
                    }
                })
                .collect()
        })
        .collect();
    let progress = wf.progress(annotator_id);
    Ok(Some(AnnotationTask {
        image_uri: state
            .registry
            .get(&image_id)
            .map(|r| r.uri.clone())
            .unwrap_or_default(),
        image_id,
        stage,
        groups,
        progress: TaskProgress {
            done: progress.done,
            total: progress.total,
        },
    }))
}

async fn next_task(State(state): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Response> {
    let who = annotator(&state, &headers)?;
    let wf = state.workflow.lock();
    Ok(match build_task(&state, &wf, &who)? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Debug, Deserialize)]
pub struct AnnotationRequest {
    pub image_id: String,
    pub labels: Vec<ClassId>,
    #[serde(default)]
    pub comment: Option<String>,
    /// Defaults to the stage that is currently open.
    #[serde(default)]
    pub stage: Option<Stage>,
}

async fn post_annotation(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<AnnotationRequest>, JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let who = annotator(&state, &headers)?;
    let Json(req) = body?;
    let mut wf = state.workflow.lock();
    let phase = wf.phase();
    let stage = req.stage.or(phase.open_stage()).ok_or_else(|| {
        ApiError::new(
            StatusCode::CONFLICT,
            "stale_stage",
            format!("no annotation stage is open during {phase}"),
        )
        .field("stage")
    })?;
    let outcome = wf.submit(Submission {
        annotator_id: who,
        image_id: req.image_id,
        stage,
        selected_labels: req.labels.into_iter().collect(),
        comment: req.comment,
    })?;
    Ok(Json(json!({"revision": outcome.revision, "created": outcome.created})))
}

async fn exemplars(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(class_id): Path<u32>,
) -> ApiResult<Json<serde_json::Value>> {
    principal(&state, &headers)?;
    let entry = state.catalog.get(ClassId(class_id)).ok_or_else(|| {
        ApiError::new(StatusCode::NOT_FOUND, "unknown_class", format!("no class {class_id}")).field("class_id")
    })?;
    Ok(Json(json!({
        "class_id": entry.class_id,
        "name": entry.name,
        "synonyms": entry.synonyms,
        "exemplars": entry.exemplar_refs,
    })))
}

#[derive(Debug, Deserialize)]
pub struct TriageRequest {
    pub image_id: String,
    pub quality_category: QualityCategory,
    pub gt_stance: GtStance,
}

async fn post_triage(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<TriageRequest>, JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let who = annotator(&state, &headers)?;
    let Json(req) = body?;
    let mut wf = state.workflow.lock();
    if wf.phase() != Phase::Final {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "invalid_state",
            "triage opens once labels are final",
        ));
    }
    let created = wf.record_triage(TriageRecord {
        image_id: req.image_id,
        quality_category: req.quality_category,
        gt_stance: req.gt_stance,
        annotator_id: who,
    })?;
    Ok(Json(json!({"created": created})))
}

/// Report kinds and their location inside the run directory.
pub const REPORT_KINDS: [(&str, &str); 11] = [
    ("model_selection", "artifacts/model_selection.csv"),
    ("agreement", "artifacts/agreement.csv"),
    ("agreement_summary", "artifacts/agreement_summary.json"),
    ("refiner_overlaps", "artifacts/refiner_overlaps.csv"),
    ("label_distribution", "reports/label_distribution.json"),
    ("label_distribution_csv", "reports/label_distribution.csv"),
    ("leaderboard", "reports/leaderboard.csv"),
    ("regression", "reports/regression.json"),
    ("heatmap", "reports/heatmap.csv"),
    ("heatmap_rollup", "reports/heatmap_rollup.csv"),
    ("triage", "reports/triage.json"),
];

#[derive(Debug, Deserialize)]
pub struct ReportQuery {
    pub model: Option<String>,
}

fn filter_model_rows(csv_text: &str, model: &str) -> ApiResult<String> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let mut writer = csv::Writer::from_writer(Vec::new());
    let internal = |e: csv::Error| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string());
    writer.write_record(reader.headers().map_err(internal)?).map_err(internal)?;
    let mut found = false;
    for row in reader.records() {
        let row = row.map_err(internal)?;
        if row.get(0) == Some(model) {
            found = true;
            writer.write_record(&row).map_err(internal)?;
        }
    }
    if !found {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_model", format!("no rows for model {model:?}")).field("model"));
    }
    let bytes = writer.into_inner().map_err(|e| internal(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 csv"))
}

async fn get_report(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(kind): Path<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    principal(&state, &headers)?;
    let rel = REPORT_KINDS
        .iter()
        .find(|(k, _)| *k == kind)
        .map(|(_, rel)| *rel)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_kind", format!("no report kind {kind:?}")))?;
    let not_ready = || ApiError::new(StatusCode::CONFLICT, "not_ready", format!("report {kind:?} has not been produced yet"));
    let root = state.run_root.as_ref().ok_or_else(not_ready)?;
    let text = match tokio::fs::read_to_string(root.join(rel)).await {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(not_ready()),
        Err(e) => return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
    };
    let is_csv = rel.ends_with(".csv");
    let body = match (&q.model, is_csv) {
        (Some(m), true) => filter_model_rows(&text, m)?,
        (Some(_), false) => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "invalid_parameter",
                "`model` applies to tabular reports only",
            )
            .field("model"))
        }
        (None, _) => text,
    };
    let content_type = if is_csv { "text/csv; charset=utf-8" } else { "application/json" };
    let mut resp = ([(header::CONTENT_TYPE, content_type)], body).into_response();
    if let Some(id) = state.run_id.as_deref().and_then(|id| HeaderValue::from_str(id).ok()) {
        resp.headers_mut().insert("x-run-id", id);
    }
    Ok(resp)
}

#[derive(Debug, Deserialize)]
pub struct StageRequest {
    pub to: Phase,
    /// Refinement annotators; defaults to every experienced annotator.
    #[serde(default)]
    pub refiners: Option<Vec<String>>,
}

async fn admin_stage(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<StageRequest>, JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    if !matches!(principal(&state, &headers)?, Principal::Admin) {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "admin_only", "stage control needs the admin key"));
    }
    let Json(req) = body?;
    let mut wf = state.workflow.lock();
    let changed = if wf.phase() == req.to {
        false
    } else {
        if req.to == Phase::Refinement && !wf.refinement_queue().is_empty() && wf.refinement_slices().is_none() {
            let refiners = req.refiners.clone().unwrap_or_else(|| wf.experienced_annotators());
            if wf.phase() == Phase::Analysis {
                wf.assign_refinement(&refiners)?;
            }
        }
        wf.advance(req.to)?;
        true
    };
    Ok(Json(json!({
        "phase": wf.phase(),
        "changed": changed,
        "refinement_queue": wf.refinement_queue().len(),
        "refinement_slices": wf.refinement_slices(),
    })))
}

async fn progress(State(state): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Json<serde_json::Value>> {
    let who = principal(&state, &headers)?;
    let wf = state.workflow.lock();
    let row = |id: &str| {
        let p = wf.progress(id);
        json!({"annotator_id": id, "stage": p.stage, "done": p.done, "total": p.total})
    };
    Ok(Json(match who {
        Principal::Annotator(id) => {
            let mut v = row(&id);
            v["phase"] = json!(wf.phase());
            v
        }
        Principal::Admin => json!({
            "phase": wf.phase(),
            "annotators": wf.setup().roster.iter().map(|p| row(&p.annotator_id)).collect::<Vec<_>>(),
        }),
    }))
}
