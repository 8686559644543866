//! HTTP puzzle sessions: a masked grid is handed out, the user submits labels
//! for the masked cells, and only then are the model fill and truth revealed.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex as StdMutex};
use std::time::SystemTime;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use cbisl::eval::{score_session, session_averages, MaskSpec, SessionScore};
use cbisl::{Blm, ClassId, MaskRegion, Quadro};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex;

pub struct AppState {
    quadro: Arc<Quadro>,
    dataset: Vec<Blm>,
    class_names: Vec<String>,
    default_mask: (usize, usize),
    next_id: AtomicU64,
    sessions: StdMutex<BTreeMap<u64, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(quadro: Quadro, dataset: Vec<Blm>, class_names: Vec<String>, default_mask: (usize, usize)) -> anyhow::Result<Arc<Self>> {
        let first = dataset.first().ok_or_else(|| anyhow::anyhow!("no puzzles to serve"))?;
        if first.num_classes() != quadro.num_classes() || class_names.len() != quadro.num_classes() {
            anyhow::bail!(
                "model has {} classes, data {} and names {}",
                quadro.num_classes(),
                first.num_classes(),
                class_names.len()
            );
        }
        if dataset.iter().any(|b| !b.is_complete()) {
            anyhow::bail!("puzzle grids must be fully known");
        }
        MaskSpec::Random { height: default_mask.0, width: default_mask.1 }.regions(1, first.rows(), first.cols(), 0)?;
        Ok(Arc::new(Self {
            quadro: Arc::new(quadro),
            dataset,
            class_names,
            default_mask,
            next_id: AtomicU64::new(1),
            sessions: StdMutex::new(BTreeMap::new()),
        }))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let key: u64 = id.parse().map_err(|_| ApiError::not_found(id))?;
        self.sessions.lock().expect("session map").get(&key).cloned().ok_or_else(|| ApiError::not_found(id))
    }
}

pub struct Session {
    pub id: String,
    pub truth: Blm,
    pub masked: Blm,
    pub mask: MaskRegion,
    pub user_labels: Option<BTreeMap<(usize, usize), ClassId>>,
    pub user_accuracy: Option<f64>,
    model: Option<Arc<ModelResult>>,
    pub created_at: SystemTime,
}

struct ModelResult {
    score: SessionScore,
    payload: Value,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/:id/labels", put(submit_labels))
        .route("/api/session/:id/model", get(model_result))
        .route("/api/session/:id/truth", get(truth))
        .route("/api/report", get(report))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": message.into() }) }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id:?}"))
    }

    fn internal(err: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

fn cells_json(blm: &Blm) -> Value {
    let rows: Vec<Vec<Option<usize>>> = (0..blm.rows())
        .map(|r| (0..blm.cols()).map(|c| blm.get(r, c).class().map(ClassId::index)).collect())
        .collect();
    json!(rows)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MaskBody {
    Region { top: usize, left: usize, height: usize, width: usize },
    Keyword(String),
}

#[derive(Deserialize, Default)]
struct NewSession {
    dataset_index: Option<usize>,
    mask: Option<MaskBody>,
    seed: Option<u64>,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: NewSession = if body.iter().all(u8::is_ascii_whitespace) { NewSession::default() } else { parse_body(&body)? };
    let key = state.next_id.fetch_add(1, Ordering::Relaxed);
    let n = state.dataset.len();
    let index = req.dataset_index.unwrap_or(((key - 1) as usize) % n);
    let truth = state
        .dataset
        .get(index)
        .ok_or_else(|| ApiError::bad_request(format!("dataset_index {index} is outside 0..{n}")))?
        .clone();
    let mask = match req.mask {
        Some(MaskBody::Region { top, left, height, width }) => {
            let region = MaskRegion::new(top, left, height, width);
            if height == 0 || width == 0 {
                return Err(ApiError::bad_request("mask must be at least 1x1"));
            }
            region.check_fits(truth.rows(), truth.cols()).map_err(|e| ApiError::bad_request(e.to_string()))?;
            region
        }
        Some(MaskBody::Keyword(k)) if k != "random" => {
            return Err(ApiError::bad_request(format!("mask must be a region or \"random\", got {k:?}")));
        }
        _ => {
            let (height, width) = state.default_mask;
            MaskSpec::Random { height, width }
                .regions(1, truth.rows(), truth.cols(), req.seed.unwrap_or(key))
                .map_err(ApiError::internal)?[0]
        }
    };
    let masked = truth.apply_mask(&mask).map_err(ApiError::internal)?;
    let id = key.to_string();
    let payload = json!({
        "id": id,
        "rows": masked.rows(),
        "cols": masked.cols(),
        "num_classes": masked.num_classes(),
        "class_names": state.class_names,
        "cells": cells_json(&masked),
    });
    let session = Session {
        id,
        truth,
        masked,
        mask,
        user_labels: None,
        user_accuracy: None,
        model: None,
        created_at: SystemTime::now(),
    };
    state.sessions.lock().expect("session map").insert(key, Arc::new(Mutex::new(session)));
    Ok(Json(payload))
}

#[derive(Deserialize)]
struct Label {
    r: usize,
    c: usize,
    class: usize,
}

#[derive(Deserialize)]
struct Labels {
    labels: Vec<Label>,
}

async fn submit_labels(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let handle = state.session(&id)?;
    let req: Labels = parse_body(&body)?;
    let mut session = handle.lock().await;
    if session.user_labels.is_some() {
        return Err(ApiError::new(StatusCode::CONFLICT, "labels were already submitted"));
    }
    let nc = session.masked.num_classes();
    let mut labels = BTreeMap::new();
    for l in &req.labels {
        if l.class >= nc {
            return Err(ApiError::bad_request(format!("class {} at ({}, {}) is outside 0..{nc}", l.class, l.r, l.c)));
        }
        if labels.insert((l.r, l.c), ClassId(l.class)).is_some() {
            return Err(ApiError::bad_request(format!("duplicate label for ({}, {})", l.r, l.c)));
        }
    }
    // Only the user side matters here; the model fill is not needed yet.
    let score = score_session(&session.id, &session.masked, &session.truth, &labels, &session.truth);
    let score = match score {
        Ok(s) => s,
        Err(cbisl::Error::IncompleteLabels { missing }) => {
            let coords: Vec<[usize; 2]> = missing.iter().map(|&(r, c)| [r, c]).collect();
            return Err(ApiError {
                status: StatusCode::BAD_REQUEST,
                body: json!({ "error": format!("labels missing for {} masked cells", coords.len()), "missing": coords }),
            });
        }
        Err(cbisl::Error::UnexpectedLabels { extra }) => {
            let coords: Vec<[usize; 2]> = extra.iter().map(|&(r, c)| [r, c]).collect();
            return Err(ApiError {
                status: StatusCode::BAD_REQUEST,
                body: json!({ "error": "labels given for cells that are not masked", "unexpected": coords }),
            });
        }
        Err(e) => return Err(ApiError::internal(e)),
    };
    session.user_labels = Some(labels);
    session.user_accuracy = Some(score.user_accuracy);
    Ok(Json(json!({ "user_accuracy": score.user_accuracy })))
}

#[derive(Serialize)]
struct DistEntry<'a> {
    r: usize,
    c: usize,
    probs: &'a [f64],
}

/// Runs the ensemble once per session and caches the payload.
async fn ensure_model(state: &AppState, session: &mut Session) -> Result<Arc<ModelResult>, ApiError> {
    if let Some(done) = &session.model {
        return Ok(done.clone());
    }
    let labels = session
        .user_labels
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::FORBIDDEN, "submit labels before requesting the model result"))?;
    let quadro = state.quadro.clone();
    let masked = session.masked.clone();
    let infill = tokio::task::spawn_blocking(move || quadro.ensemble_infill(&masked))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    let score = score_session(&session.id, &session.masked, &session.truth, &labels, &infill.filled).map_err(ApiError::internal)?;
    let dists: Vec<DistEntry> = infill.dists.iter().map(|(&(r, c), d)| DistEntry { r, c, probs: d.probs() }).collect();
    let payload = json!({
        "cells": cells_json(&infill.filled),
        "dists": dists,
        "model_accuracy": score.model_accuracy,
    });
    let result = Arc::new(ModelResult { score, payload });
    session.model = Some(result.clone());
    Ok(result)
}

async fn model_result(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let handle = state.session(&id)?;
    let mut session = handle.lock().await;
    let result = ensure_model(&state, &mut session).await?;
    Ok(Json(result.payload.clone()))
}

async fn truth(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let handle = state.session(&id)?;
    let session = handle.lock().await;
    if session.user_labels.is_none() {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "submit labels before requesting the truth"));
    }
    Ok(Json(json!({ "cells": cells_json(&session.truth) })))
}

async fn report(State(state): State<Arc<AppState>>) -> ApiResult {
    let handles: Vec<Arc<Mutex<Session>>> = state.sessions.lock().expect("session map").values().cloned().collect();
    let mut scores = Vec::new();
    for handle in handles {
        let mut session = handle.lock().await;
        if session.user_labels.is_none() {
            continue;
        }
        scores.push(ensure_model(&state, &mut session).await?.score.clone());
    }
    let rows: Vec<Value> = scores
        .iter()
        .map(|s| json!({ "id": s.id, "user_accuracy": s.user_accuracy, "model_accuracy": s.model_accuracy }))
        .collect();
    let (user_average, model_average) = match session_averages(&scores) {
        Some((u, m)) => (json!(u), json!(m)),
        None => (Value::Null, Value::Null),
    };
    Ok(Json(json!({ "sessions": rows, "user_average": user_average, "model_average": model_average })))
}
