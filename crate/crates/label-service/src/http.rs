use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use oppo_core::data::write_preferences;

use crate::store::{LabelStore, StoreError, Submission};

pub type SharedStore = Arc<Mutex<LabelStore>>;

impl IntoResponse for StoreError {
    fn into_response(self) -> Response {
        let status = match &self {
            StoreError::Validation(_) => StatusCode::BAD_REQUEST,
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Conflict(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

fn lock(store: &SharedStore) -> std::sync::MutexGuard<'_, LabelStore> {
    store.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

#[derive(Deserialize)]
struct ExportQuery {
    dataset_ref: String,
}

async fn next_task(State(store): State<SharedStore>, Query(q): Query<NextQuery>) -> Result<Response, StoreError> {
    Ok(match lock(&store).next_task(&q.annotator)? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit(State(store): State<SharedStore>, Json(sub): Json<Submission>) -> Result<Response, StoreError> {
    let status = lock(&store).submit(&sub)?;
    Ok(Json(serde_json::json!({ "task_id": sub.task_id, "status": status })).into_response())
}

async fn trajectory(State(store): State<SharedStore>, Path(id): Path<usize>) -> Result<Response, StoreError> {
    Ok(Json(lock(&store).render(id)?).into_response())
}

async fn export(State(store): State<SharedStore>, Query(q): Query<ExportQuery>) -> Result<Response, StoreError> {
    let prefs = lock(&store).export(&q.dataset_ref)?;
    let bytes = write_preferences(&prefs)?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (header::CONTENT_DISPOSITION, "attachment; filename=\"prefs.bin\"".to_string()),
        ],
        bytes,
    )
        .into_response())
}

async fn progress(State(store): State<SharedStore>) -> Response {
    Json(lock(&store).progress()).into_response()
}

pub fn router(store: SharedStore) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/labels", post(submit))
        .route("/api/trajectories/{id}", get(trajectory))
        .route("/api/export", get(export))
        .route("/api/progress", get(progress))
        .with_state(store)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, store: LabelStore) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("label service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(Mutex::new(store)))).await
}
