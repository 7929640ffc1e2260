//! JSON-over-HTTP routes.
//!
//! `GET /frames?state=&page=&page_size=`, `GET /frames/{id}`,
//! `GET /frames/{id}/image`, `POST /decisions`, `POST /export`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower_http::services::ServeDir;

use crate::store::{ExportOptions, FrameState, ReviewDecision, ReviewError, ReviewStore};

pub const DEFAULT_PAGE_SIZE: usize = 50;

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        let status = match &self {
            ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
            ReviewError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

fn bad_request(msg: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(serde_json::json!({ "error": msg }))).into_response()
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    #[serde(default)]
    state: String,
    #[serde(default)]
    page: usize,
    page_size: Option<usize>,
}

async fn list_frames(State(store): State<Arc<ReviewStore>>, Query(q): Query<ListQuery>) -> Response {
    let Some(filter) = FrameState::parse(&q.state) else {
        return bad_request(format!("unknown state filter {:?}", q.state));
    };
    Json(store.list_frames(filter, q.page, q.page_size.unwrap_or(DEFAULT_PAGE_SIZE))).into_response()
}

async fn get_frame(State(store): State<Arc<ReviewStore>>, Path(id): Path<String>) -> Response {
    match store.frame_view(&id) {
        Ok(v) => Json(v).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn get_image(State(store): State<Arc<ReviewStore>>, Path(id): Path<String>) -> Response {
    let Some(path) = store.dataset().image_path(&id) else {
        return ReviewError::NotFound(format!("image of frame {id}")).into_response();
    };
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        _ => "image/jpeg",
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, mime)], bytes).into_response(),
        Err(e) => ReviewError::Io { path, source: e }.into_response(),
    }
}

async fn post_decision(State(store): State<Arc<ReviewStore>>, Json(d): Json<ReviewDecision>) -> Response {
    // the fsync blocks; keep it off the reactor
    match tokio::task::spawn_blocking(move || store.post(d)).await {
        Ok(Ok(entry)) => Json(entry).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

#[derive(Debug, Deserialize)]
struct ExportRequest {
    out_dir: PathBuf,
    #[serde(default)]
    strict: bool,
    box_width_px: Option<f64>,
    box_height_px: Option<f64>,
}

async fn export(State(store): State<Arc<ReviewStore>>, Json(req): Json<ExportRequest>) -> Response {
    let defaults = ExportOptions::default();
    let opts = ExportOptions {
        strict: req.strict,
        box_width_px: req.box_width_px.unwrap_or(defaults.box_width_px),
        box_height_px: req.box_height_px.unwrap_or(defaults.box_height_px),
    };
    match tokio::task::spawn_blocking(move || store.export(&req.out_dir, &opts)).await {
        Ok(Ok(m)) => Json(m).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

/// API routes; static files from `ui_dir` are served for every other path.
pub fn router(store: Arc<ReviewStore>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/frames", get(list_frames))
        .route("/frames/{id}", get(get_frame))
        .route("/frames/{id}/image", get(get_image))
        .route("/decisions", post(post_decision))
        .route("/export", post(export))
        .with_state(store);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    store: Arc<ReviewStore>,
    ui_dir: Option<PathBuf>,
) -> std::io::Result<()> {
    axum::serve(listener, router(store, ui_dir)).await
}
