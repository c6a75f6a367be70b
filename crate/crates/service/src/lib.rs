//! JSON-over-HTTP review API for sessions in a [`Store`].
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/sessions` | |
//! | GET | `/sessions/{id}` | |
//! | GET | `/sessions/{id}/experiments` | |
//! | GET | `/sessions/{id}/mask-report` | |
//! | GET | `/sessions/{id}/sensitivity` | |
//! | GET | `/sessions/{id}/pareto` | |
//! | POST | `/sessions/{id}/decisions` | `{"stage", "choice", "note"}` |
//! | POST | `/sessions/{id}/advance` | |
//!
//! Reads load the session file, which is always replaced atomically. Writes to
//! one session are serialized; a write that finds the session busy, or a
//! decision that does not match the current stage, gets `409 Conflict`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use modeldisc_core::model::ModelCatalog;
use modeldisc_core::session::{self, Choice, Session, SessionError, Stage, Store};

#[derive(Clone)]
struct AppState {
    store: Store,
    catalog: Arc<ModelCatalog>,
    locks: Arc<Mutex<HashMap<String, Arc<Mutex<()>>>>>,
}

impl AppState {
    fn lock_for(&self, id: &str) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(id.to_string()).or_default().clone()
    }
}

/// An error response: status plus `{"error": ...}`.
pub struct ApiError {
    status: StatusCode,
    message: String,
    stage: Option<Stage>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            stage: None,
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::NotFound(_) | SessionError::NotReady(_) => StatusCode::NOT_FOUND,
            SessionError::InvalidDecision { .. }
            | SessionError::DecisionPending(_)
            | SessionError::MissingDecision(_)
            | SessionError::Terminal(_)
            | SessionError::AlreadyExists(_) => StatusCode::CONFLICT,
            SessionError::MalformedDecision(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let stage = match &e {
            SessionError::InvalidDecision { stage, .. }
            | SessionError::DecisionPending(stage)
            | SessionError::MissingDecision(stage)
            | SessionError::Terminal(stage) => Some(*stage),
            _ => None,
        };
        ApiError {
            status,
            message: e.to_string(),
            stage,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(stage) = self.stage {
            body["stage"] = json!(stage);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn to_json<T: Serialize>(v: &T) -> ApiResult {
    serde_json::to_value(v)
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

/// Runs blocking session work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn load(state: &AppState, id: String) -> Result<Session, ApiError> {
    let store = state.store.clone();
    blocking(move || Ok(store.load(&id)?)).await
}

async fn list_sessions(State(state): State<AppState>) -> ApiResult {
    let store = state.store.clone();
    let list = blocking(move || Ok(store.list()?)).await?;
    to_json(&list)
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = load(&state, id).await?;
    let mut v = serde_json::to_value(&s).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    v["problems"] = json!(s.problems());
    v["pending_decision"] = json!(s.pending_decision());
    Ok(Json(v))
}

async fn experiments(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = load(&state, id).await?;
    let sweep = s.experiments.as_ref().ok_or(SessionError::NotReady("experiments"))?;
    Ok(Json(json!({
        "records": sweep.records,
        "best": sweep.best_record().id,
        "selected": s.selected_experiment,
    })))
}

async fn mask_report(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = load(&state, id).await?;
    to_json(s.mask_report.as_ref().ok_or(SessionError::NotReady("mask report"))?)
}

async fn sensitivity(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = load(&state, id).await?;
    to_json(&s.heatmap(&state.catalog)?)
}

#[derive(Serialize)]
struct EntryView {
    expression: String,
    infix: String,
    complexity: usize,
    mse: f64,
}

async fn pareto(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = load(&state, id).await?;
    let pareto = s.pareto.as_ref().ok_or(SessionError::NotReady("pareto fronts"))?;
    let targets: Vec<Value> = pareto
        .targets
        .iter()
        .map(|t| {
            let entries: Vec<EntryView> = t
                .front
                .entries
                .iter()
                .map(|e| EntryView {
                    expression: e.expression.to_prefix(),
                    infix: e.expression.to_infix(),
                    complexity: e.complexity,
                    mse: e.mse,
                })
                .collect();
            json!({ "equation": t.equation, "knee": t.knee, "entries": entries })
        })
        .collect();
    Ok(Json(json!({ "columns": pareto.columns, "targets": targets })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    stage: String,
    choice: String,
    #[serde(default)]
    note: String,
}

fn busy(id: &str) -> ApiError {
    ApiError::new(StatusCode::CONFLICT, format!("session `{id}` is busy"))
}

async fn post_decision(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let body: DecisionBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed decision: {e}")))?;
    let stage: Stage = body.stage.parse()?;
    let choice: Choice = body.choice.parse()?;
    blocking(move || {
        let lock = state.lock_for(&id);
        let _guard = lock.try_lock().map_err(|_| busy(&id))?;
        let mut s = state.store.load(&id)?;
        session::submit_decision(&mut s, &state.catalog, Some(stage), choice, body.note)?;
        state.store.save(&s)?;
        Ok(Json(json!({
            "id": s.id,
            "stage": s.stage,
            "decision": s.pending_decision(),
        })))
    })
    .await
}

async fn post_advance(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    blocking(move || {
        let lock = state.lock_for(&id);
        let _guard = lock.try_lock().map_err(|_| busy(&id))?;
        let mut s = state.store.load(&id)?;
        let entered = session::advance(&state.store, &state.catalog, &mut s, None)?;
        Ok(Json(json!({
            "id": s.id,
            "stage": s.stage,
            "entered": entered,
            "problems": s.problems(),
        })))
    })
    .await
}

/// The API over `store`, using the built-in model catalog.
pub fn router(store: Store) -> Router {
    router_with_catalog(store, ModelCatalog::builtin())
}

pub fn router_with_catalog(store: Store, catalog: ModelCatalog) -> Router {
    let state = AppState {
        store,
        catalog: Arc::new(catalog),
        locks: Arc::default(),
    };
    Router::new()
        .route("/sessions", get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/experiments", get(experiments))
        .route("/sessions/{id}/mask-report", get(mask_report))
        .route("/sessions/{id}/sensitivity", get(sensitivity))
        .route("/sessions/{id}/pareto", get(pareto))
        .route("/sessions/{id}/decisions", post(post_decision))
        .route("/sessions/{id}/advance", post(post_advance))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(store: Store, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("serving {} on http://{}", store.root().display(), listener.local_addr()?);
    axum::serve(listener, router(store)).await
}
