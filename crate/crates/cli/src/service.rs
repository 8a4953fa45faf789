//! HTTP front end of a live session.
//!
//! Records are applied through a single-writer queue: a record posted while
//! a query is pending waits until the query is answered or auto-resolved.
//! Labels, metrics and model summaries never wait behind that queue.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Notify;

use namedis::active::QueryEvent;
use namedis::pipeline::Embedder;
use namedis::records::RawRecord;
use namedis::session::{ModelSummary, Session, SessionMetrics};
use namedis::Error;

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    /// A pending query older than this is resolved with the model prediction.
    pub query_timeout: Duration,
    pub snapshot: Option<PathBuf>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            query_timeout: Duration::from_secs(300),
            snapshot: None,
        }
    }
}

struct Core {
    session: Session,
    pending_since: Option<Instant>,
    pending_record: Option<RawRecord>,
    ids: HashSet<String>,
}

pub struct AppState {
    writer: tokio::sync::Mutex<()>,
    core: Mutex<Core>,
    changed: Notify,
    embedder: Embedder,
    options: ServiceOptions,
}

impl AppState {
    pub fn new(session: Session, embedder: Embedder, options: ServiceOptions) -> Arc<Self> {
        let ids = session.entries().iter().map(|e| e.id.clone()).collect();
        let pending_since = session.pending().map(|_| Instant::now());
        Arc::new(Self {
            writer: tokio::sync::Mutex::new(()),
            core: Mutex::new(Core {
                session,
                pending_since,
                pending_record: None,
                ids,
            }),
            changed: Notify::new(),
            embedder,
            options,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Core> {
        // A panic inside a handler must not take the service down with it.
        self.core.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Skips the pending query if its time is up. Returns the deadline of a
    /// query that is still open.
    fn expire(&self, core: &mut Core) -> Option<Instant> {
        let index = core.session.pending()?.index;
        let since = *core.pending_since.get_or_insert_with(Instant::now);
        let deadline = since + self.options.query_timeout;
        if Instant::now() >= deadline {
            if core.session.skip(index).is_ok() {
                log::info!("query for record {index} timed out; keeping the model prediction");
            }
            core.pending_since = None;
            core.pending_record = None;
            self.changed.notify_waiters();
            None
        } else {
            Some(deadline)
        }
    }

    /// Saves the session to the configured snapshot path, if any.
    pub fn snapshot(&self) -> Result<Option<(PathBuf, usize)>, Error> {
        let Some(path) = self.options.snapshot.clone() else {
            return Ok(None);
        };
        let mut core = self.lock();
        core.session.save(&path)?;
        Ok(Some((path, core.session.processed())))
    }

    /// Copy of the current session.
    pub fn session(&self) -> Session {
        self.lock().session.clone()
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    kind: &'static str,
}

fn error(status: StatusCode, kind: &'static str, msg: impl Into<String>) -> Response {
    (
        status,
        Json(ErrorBody {
            error: msg.into(),
            kind,
        }),
    )
        .into_response()
}

fn core_error(e: Error) -> Response {
    match e {
        Error::StaleQuery { .. } => error(StatusCode::CONFLICT, "stale-query", e.to_string()),
        Error::QueryPending { .. } => error(StatusCode::CONFLICT, "query-pending", e.to_string()),
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::Parse { .. } => {
            error(StatusCode::UNPROCESSABLE_ENTITY, "invalid", e.to_string())
        }
        _ => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, Box<Response>> {
    serde_json::from_slice(body).map_err(|e| Box::new(error(StatusCode::BAD_REQUEST, "malformed", e.to_string())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMass {
    pub label: String,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: String,
    pub mass: f64,
    /// Ids of the most recent earlier stream records with this label.
    pub representatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordView {
    pub title: String,
    pub coauthors: Vec<String>,
    pub venue: String,
    pub year: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub index: usize,
    pub record_id: String,
    pub record: Option<RecordView>,
    pub candidates: Vec<Candidate>,
    pub entropy: f64,
    pub threshold: f64,
    pub seconds_remaining: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordResponse {
    pub index: usize,
    pub prediction: String,
    pub posterior: Vec<LabelMass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<QueryView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub index: usize,
    pub label: String,
}

fn query_view(state: &AppState, core: &Core, q: &QueryEvent) -> QueryView {
    let earlier = &core.session.entries()[..q.index];
    let candidates = q
        .distribution
        .iter()
        .map(|(label, mass)| Candidate {
            label: label.clone(),
            mass: *mass,
            representatives: earlier
                .iter()
                .rev()
                .filter(|e| e.label == *label)
                .take(3)
                .map(|e| e.id.clone())
                .collect(),
        })
        .collect();
    let remaining = core
        .pending_since
        .map(|s| state.options.query_timeout.saturating_sub(s.elapsed()))
        .unwrap_or(state.options.query_timeout);
    QueryView {
        index: q.index,
        record_id: q.record_id.clone(),
        record: core.pending_record.as_ref().map(|r| RecordView {
            title: r.title.clone(),
            coauthors: r.coauthors.clone(),
            venue: r.venue.clone(),
            year: r.year,
        }),
        candidates,
        entropy: q.entropy,
        threshold: q.threshold,
        seconds_remaining: remaining.as_secs_f64(),
    }
}

async fn post_records(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let record: RawRecord = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return *resp,
    };
    if let Err(m) = record.validate() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "invalid", m);
    }
    let x = match state.embedder.embed(&record) {
        Ok(x) => x,
        Err(e) => return core_error(e),
    };
    let _turn = state.writer.lock().await;
    loop {
        let changed = state.changed.notified();
        tokio::pin!(changed);
        changed.as_mut().enable();
        let deadline = {
            let mut core = state.lock();
            match state.expire(&mut core) {
                Some(d) => d,
                None => {
                    if !core.ids.insert(record.id.clone()) {
                        return error(
                            StatusCode::CONFLICT,
                            "duplicate",
                            format!("record `{}` was already posted", record.id),
                        );
                    }
                    let obs = match core.session.observe(&record.id, &x, record.true_label.as_deref()) {
                        Ok(o) => o,
                        Err(e) => {
                            core.ids.remove(&record.id);
                            return core_error(e);
                        }
                    };
                    if core.session.pending().is_some() {
                        core.pending_since = Some(Instant::now());
                        core.pending_record = Some(record.clone());
                    }
                    let query = core.session.pending().map(|q| query_view(&state, &core, q));
                    let resp = RecordResponse {
                        index: obs.index,
                        prediction: obs.prediction,
                        posterior: obs
                            .posterior
                            .into_iter()
                            .map(|(label, mass)| LabelMass { label, mass })
                            .collect(),
                        query,
                    };
                    return Json(resp).into_response();
                }
            }
        };
        tokio::select! {
            _ = &mut changed => {}
            _ = tokio::time::sleep_until(deadline.into()) => {}
        }
    }
}

async fn get_queries(State(state): State<Arc<AppState>>) -> Response {
    let mut core = state.lock();
    state.expire(&mut core);
    let view = core.session.pending().map(|q| query_view(&state, &core, q));
    Json(json!({ "pending": view })).into_response()
}

async fn post_labels(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: LabelRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return *resp,
    };
    let mut core = state.lock();
    state.expire(&mut core);
    match core.session.answer(req.index, &req.label) {
        Ok(()) => {
            core.pending_since = None;
            core.pending_record = None;
            state.changed.notify_waiters();
            Json(json!({ "index": req.index, "label": req.label.trim() })).into_response()
        }
        Err(e) => core_error(e),
    }
}

async fn get_metrics(State(state): State<Arc<AppState>>) -> Json<SessionMetrics> {
    let mut core = state.lock();
    state.expire(&mut core);
    Json(core.session.metrics())
}

async fn get_model(State(state): State<Arc<AppState>>) -> Json<ModelSummary> {
    Json(state.lock().session.summary())
}

async fn post_snapshot(State(state): State<Arc<AppState>>) -> Response {
    match state.snapshot() {
        Ok(Some((path, processed))) => Json(json!({ "path": path, "processed": processed })).into_response(),
        Ok(None) => error(
            StatusCode::BAD_REQUEST,
            "no-snapshot-path",
            "the service was started without a snapshot path",
        ),
        Err(e) => core_error(e),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/records", post(post_records))
        .route("/queries", get(get_queries))
        .route("/labels", post(post_labels))
        .route("/metrics", get(get_metrics))
        .route("/model", get(get_model))
        .route("/snapshot", post(post_snapshot))
        .with_state(state)
}

/// Serves until interrupted, then writes the snapshot if one is configured.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    match state.snapshot() {
        Ok(Some((path, n))) => log::info!("wrote snapshot {} after {n} records", path.display()),
        Ok(None) => {}
        Err(e) => log::error!("shutdown snapshot failed: {e}"),
    }
    Ok(())
}
