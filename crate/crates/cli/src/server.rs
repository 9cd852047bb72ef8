//! Annotation HTTP API. Human rankings are the only thing it writes; every
//! write goes through one mutex-guarded store.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;

use rlhaif_core::jsonl;
use rlhaif_core::prefs::{CandidateSet, Ranking, Rater, RaterKind, RankingStore};

use crate::error::CliResult;

pub struct AppState {
    /// Keyed and therefore ordered by question id.
    sets: BTreeMap<String, CandidateSet>,
    store: Mutex<RankingStore>,
    static_dir: PathBuf,
}

impl AppState {
    pub fn load(candidates: &Path, rankings: &Path, static_dir: &Path) -> CliResult<Self> {
        let sets: Vec<CandidateSet> = jsonl::read(candidates)?;
        Ok(AppState {
            sets: sets.into_iter().map(|s| (s.question_id.clone(), s)).collect(),
            store: Mutex::new(RankingStore::open(rankings)?),
            static_dir: static_dir.to_path_buf(),
        })
    }
}

#[derive(Debug, Deserialize)]
pub struct RaterQuery {
    rater: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub ranked_by_rater: usize,
    /// Questions with at least one human ranking.
    pub ranked_any: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerView {
    pub label: String,
    pub text: String,
}

/// `done: true` carries no question.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskView {
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<AnswerView>,
    pub progress: Progress,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub question_id: String,
    pub rater_id: String,
    pub order: Vec<String>,
    #[serde(default)]
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelProblem {
    pub label: String,
    pub problem: String,
}

/// Everything wrong with `order` as a permutation of `expected`.
pub fn permutation_diagnostics(order: &[String], expected: &[String]) -> Vec<LabelProblem> {
    let known: HashSet<&str> = expected.iter().map(String::as_str).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for l in order {
        if !known.contains(l.as_str()) {
            out.push(LabelProblem { label: l.clone(), problem: "unknown label".into() });
        } else if !seen.insert(l.as_str()) {
            out.push(LabelProblem { label: l.clone(), problem: "duplicate".into() });
        }
    }
    for l in expected {
        if !seen.contains(l.as_str()) {
            out.push(LabelProblem { label: l.clone(), problem: "missing".into() });
        }
    }
    out
}

fn human(rater_id: &str) -> Rater {
    Rater { kind: RaterKind::Human, id: rater_id.to_string() }
}

fn progress(state: &AppState, store: &RankingStore, rater: Option<&str>) -> Progress {
    let mut by_rater = BTreeSet::new();
    let mut any = BTreeSet::new();
    for r in store.rankings().iter().filter(|r| r.rater.kind == RaterKind::Human && state.sets.contains_key(&r.question_id)) {
        any.insert(r.question_id.as_str());
        if Some(r.rater.id.as_str()) == rater {
            by_rater.insert(r.question_id.as_str());
        }
    }
    Progress { total: state.sets.len(), ranked_by_rater: by_rater.len(), ranked_any: any.len() }
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn rater_param(q: &RaterQuery) -> Result<&str, Response> {
    match q.rater.as_deref().map(str::trim) {
        Some(r) if !r.is_empty() => Ok(r),
        _ => Err(error(StatusCode::BAD_REQUEST, "missing ?rater=<id>")),
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn next_task(State(state): State<Arc<AppState>>, Query(q): Query<RaterQuery>) -> Response {
    let rater = match rater_param(&q) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let store = state.store.lock().await;
    let mine: HashSet<&str> = store
        .rankings()
        .iter()
        .filter(|r| r.rater == human(rater))
        .map(|r| r.question_id.as_str())
        .collect();
    let progress = progress(&state, &store, Some(rater));
    let view = match state.sets.values().find(|s| !mine.contains(s.question_id.as_str())) {
        Some(set) => TaskView {
            done: false,
            question_id: Some(set.question_id.clone()),
            question: Some(set.question.clone()),
            answers: set.answers.iter().map(|a| AnswerView { label: a.label.clone(), text: a.text.clone() }).collect(),
            progress,
        },
        None => TaskView { done: true, question_id: None, question: None, answers: Vec::new(), progress },
    };
    Json(view).into_response()
}

async fn submit(State(state): State<Arc<AppState>>, Json(sub): Json<Submission>) -> Response {
    let Some(set) = state.sets.get(&sub.question_id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown question_id {:?}", sub.question_id));
    };
    let rater_id = sub.rater_id.trim();
    if rater_id.is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "rater_id must be non-empty");
    }
    let diagnostics = permutation_diagnostics(&sub.order, &set.labels());
    if !diagnostics.is_empty() || sub.order.len() != set.answers.len() {
        let body = json!({
            "error": format!("order must list each of the {} labels exactly once", set.answers.len()),
            "diagnostics": diagnostics,
        });
        return (StatusCode::UNPROCESSABLE_ENTITY, Json(body)).into_response();
    }
    if sub.explanation.trim().is_empty() {
        log::warn!("{rater_id} ranked {} without an explanation", sub.question_id);
    }
    let ranking = Ranking {
        question_id: sub.question_id.clone(),
        rater: human(rater_id),
        order: sub.order,
        explanation: sub.explanation,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
    };
    let mut store = state.store.lock().await;
    match store.upsert(ranking) {
        Ok(replaced) => Json(json!({ "status": "ok", "replaced": replaced })).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn get_progress(State(state): State<Arc<AppState>>, Query(q): Query<RaterQuery>) -> Json<Progress> {
    let store = state.store.lock().await;
    Json(progress(&state, &store, q.rater.as_deref()))
}

const PLACEHOLDER: &str = "<!doctype html><title>rlhaif</title><p>The annotation UI is not built. \
The JSON API is available under <code>/api/</code>.</p>\n";

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        _ => "application/octet-stream",
    }
}

/// Request path as a relative file path; `None` if it could leave the root.
fn static_relative(uri_path: &str) -> Option<&Path> {
    let rel = uri_path.trim_start_matches('/');
    let rel = Path::new(if rel.is_empty() { "index.html" } else { rel });
    rel.components().all(|c| matches!(c, Component::Normal(_))).then_some(rel)
}

async fn static_file(State(state): State<Arc<AppState>>, uri: Uri) -> Response {
    let Some(rel) = static_relative(uri.path()) else {
        return error(StatusCode::NOT_FOUND, "not found");
    };
    let path = state.static_dir.join(rel);
    match std::fs::read(&path) {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) if rel == Path::new("index.html") => {
            ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], PLACEHOLDER).into_response()
        }
        Err(_) => error(StatusCode::NOT_FOUND, "not found"),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/tasks/next", get(next_task))
        .route("/api/rankings", post(submit))
        .route("/api/progress", get(get_progress))
        .fallback(get(static_file))
        .with_state(state)
}

/// Serves until the process exits.
pub fn serve_blocking(state: Arc<AppState>, listener: std::net::TcpListener) -> std::io::Result<()> {
    listener.set_nonblocking(true)?;
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, router(state)).await
    })
}

/// Binds `addr` and serves on a background thread; returns the bound address.
pub fn spawn(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<SocketAddr> {
    let listener = std::net::TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    std::thread::spawn(move || {
        if let Err(e) = serve_blocking(state, listener) {
            log::error!("server stopped: {e}");
        }
    });
    Ok(local)
}
