//! JSON-over-HTTP API under `/v1`.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use skysearch_core::pipeline::{Pipeline, QueryResult};
use skysearch_core::scene::{Annotation, Dataset, Split};
use skysearch_core::Error;

/// Read-only state shared by every request.
pub struct AppState {
    pub dataset: Dataset,
    /// `None` when checkpoints were missing at startup.
    pub pipeline: Option<Pipeline>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/vocab", get(vocab))
        .route("/v1/frames", get(frames))
        .route("/v1/frames/{id}", get(frame))
        .route("/v1/frames/{id}/image", get(image))
        .route("/v1/query", post(query))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError { status, body: json!({ "error": kind, "message": message.into() }) }
    }

    fn unknown_frame(id: u32) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_frame", format!("no frame with id {id}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownWord { word, vocabulary } => ApiError {
                status: StatusCode::BAD_REQUEST,
                body: json!({
                    "error": "unknown_word",
                    "message": format!("unknown action word {word:?}"),
                    "word": word,
                    "vocabulary": vocabulary,
                }),
            },
            Error::Empty(_) | Error::Config(_) => Self::new(StatusCode::BAD_REQUEST, e.kind(), e.to_string()),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.kind(), other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_id(raw: &str) -> ApiResult<u32> {
    raw.parse()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("invalid frame id {raw:?}")))
}

async fn health(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model_loaded": s.pipeline.is_some(),
        "frames": s.dataset.frames.len(),
    }))
}

async fn vocab(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "words": s.dataset.vocab }))
}

#[derive(Debug, Deserialize)]
pub struct Page {
    #[serde(default)]
    offset: usize,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    100
}

#[derive(Debug, Serialize)]
struct FrameSummary {
    frame_id: u32,
    split: Option<Split>,
    annotations: usize,
}

async fn frames(State(s): State<Arc<AppState>>, Query(page): Query<Page>) -> ApiResult<Json<serde_json::Value>> {
    if page.limit == 0 || page.limit > 1000 {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "limit must be in 1..=1000"));
    }
    let ds = &s.dataset;
    let items: Vec<FrameSummary> = ds
        .frames
        .iter()
        .skip(page.offset)
        .take(page.limit)
        .map(|f| FrameSummary { frame_id: f.frame_id, split: ds.splits.split_of(f.frame_id), annotations: f.annotations.len() })
        .collect();
    Ok(Json(json!({
        "total": ds.frames.len(),
        "offset": page.offset,
        "limit": page.limit,
        "frames": items,
    })))
}

#[derive(Debug, Serialize)]
struct FrameDetail<'a> {
    frame_id: u32,
    split: Option<Split>,
    width: usize,
    height: usize,
    lowres_size: usize,
    annotations: &'a [Annotation],
}

async fn frame(State(s): State<Arc<AppState>>, Path(raw): Path<String>) -> ApiResult<Response> {
    let id = parse_id(&raw)?;
    let ds = &s.dataset;
    let f = ds.frame(id).ok_or(ApiError::unknown_frame(id))?;
    Ok(Json(FrameDetail {
        frame_id: id,
        split: ds.splits.split_of(id),
        width: f.highres.width(),
        height: f.highres.height(),
        lowres_size: ds.config.lowres,
        annotations: &f.annotations,
    })
    .into_response())
}

#[derive(Debug, Deserialize)]
pub struct ImageParams {
    res: Option<String>,
}

async fn image(
    State(s): State<Arc<AppState>>,
    Path(raw): Path<String>,
    Query(p): Query<ImageParams>,
) -> ApiResult<Response> {
    let id = parse_id(&raw)?;
    let ds = &s.dataset;
    let f = ds.frame(id).ok_or(ApiError::unknown_frame(id))?;
    let png = match p.res.as_deref().unwrap_or("high") {
        "high" => f.highres.encode_png()?,
        "low" => ds.lowres(f).encode_png()?,
        other => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "bad_request",
                format!("res must be \"high\" or \"low\", got {other:?}"),
            ))
        }
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Deserialize)]
pub struct QueryRequest {
    pub frame_id: u32,
    pub actions: Vec<String>,
}

async fn query(State(s): State<Arc<AppState>>, Json(req): Json<QueryRequest>) -> ApiResult<Json<QueryResult>> {
    if s.pipeline.is_none() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "not_loaded", "checkpoints are not loaded"));
    }
    if s.dataset.frame(req.frame_id).is_none() {
        return Err(ApiError::unknown_frame(req.frame_id));
    }
    let state = Arc::clone(&s);
    let result = tokio::task::spawn_blocking(move || {
        let ds = &state.dataset;
        let f = ds.frame(req.frame_id).expect("checked above");
        let pipeline = state.pipeline.as_ref().expect("checked above");
        pipeline.answer(&ds.frame_pair(f), req.frame_id, &req.actions)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(result))
}
