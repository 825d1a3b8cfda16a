//! REST service for the interactive mapping loop: open a region of the
//! embedding store, view its PCA false colour, place labelled points, fit a
//! kNN classifier and fetch the per-pixel prediction overlay.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | POST | `/sessions` | `{bbox, year, classes?}` | `{session_id, width, height}` |
//! | GET | `/sessions/{id}` | | session state |
//! | GET | `/sessions/{id}/pca.png` | | RGB PNG |
//! | POST | `/sessions/{id}/labels` | `{x, y, class}` | `{count}` |
//! | POST | `/sessions/{id}/train` | `{k?}` | `{trained, n_points}` |
//! | GET | `/sessions/{id}/prediction.png` | | RGBA PNG |
//!
//! Coordinates are map units; a label belongs to the grid cell containing
//! it. Errors are `{"error": message}` with status 400 (malformed request),
//! 404 (unknown session, no coverage), 422 (point outside the region or
//! unknown class) or 409 (too few labels, not trained).

mod error;
mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;
use uuid::Uuid;

pub use error::ApiError;
pub use session::{
    default_classes, ClassDef, CreateSession, LabelCount, LabelPoint, LabelRequest, LabelSession, MapService,
    SessionCreated, TrainRequest, TrainResponse, DEFAULT_K, OVERLAY_ALPHA,
};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub store: PathBuf,
    pub sessions: PathBuf,
    /// Directory of static UI files served at `/`.
    pub static_dir: Option<PathBuf>,
    /// Allowed CORS origin; any origin when unset.
    pub cors_origin: Option<String>,
}

type Svc = Arc<MapService>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

fn body<T>(r: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    r.map(|Json(v)| v).map_err(|e| ApiError::BadRequest(e.body_text()))
}

fn session_id(raw: &str) -> Result<Uuid, ApiError> {
    Uuid::parse_str(raw).map_err(|_| ApiError::NotFound(format!("no session {raw}")))
}

fn png(bytes: impl Into<axum::body::Body>) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "image/png")], bytes.into())
}

async fn create(
    State(svc): State<Svc>,
    req: Result<Json<CreateSession>, JsonRejection>,
) -> Result<Json<SessionCreated>, ApiError> {
    let req = body(req)?;
    blocking(move || svc.create_session(req)).await.map(Json)
}

async fn show(State(svc): State<Svc>, Path(id): Path<String>) -> Result<Json<LabelSession>, ApiError> {
    let id = session_id(&id)?;
    blocking(move || svc.session(id)).await.map(Json)
}

async fn pca(State(svc): State<Svc>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let id = session_id(&id)?;
    let bytes = blocking(move || svc.pca_png(id)).await?;
    Ok(png(bytes.as_ref().clone()))
}

async fn label(
    State(svc): State<Svc>,
    Path(id): Path<String>,
    req: Result<Json<LabelRequest>, JsonRejection>,
) -> Result<Json<LabelCount>, ApiError> {
    let id = session_id(&id)?;
    let req = body(req)?;
    blocking(move || svc.add_label(id, req)).await.map(Json)
}

async fn train(
    State(svc): State<Svc>,
    Path(id): Path<String>,
    req: Result<Json<TrainRequest>, JsonRejection>,
) -> Result<Json<TrainResponse>, ApiError> {
    let id = session_id(&id)?;
    let req = body(req)?;
    blocking(move || svc.train(id, req)).await.map(Json)
}

async fn prediction(State(svc): State<Svc>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let id = session_id(&id)?;
    Ok(png(blocking(move || svc.prediction_png(id)).await?))
}

pub fn router(svc: Arc<MapService>, cfg: &ServiceConfig) -> Result<Router, ApiError> {
    let cors = match &cfg.cors_origin {
        Some(o) => CorsLayer::new()
            .allow_origin(HeaderValue::from_str(o).map_err(|e| ApiError::BadRequest(e.to_string()))?)
            .allow_methods(Any)
            .allow_headers(Any),
        None => CorsLayer::permissive(),
    };
    let mut app = Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/pca.png", get(pca))
        .route("/sessions/{id}/labels", post(label))
        .route("/sessions/{id}/train", post(train))
        .route("/sessions/{id}/prediction.png", get(prediction))
        .with_state(svc);
    if let Some(dir) = &cfg.static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    Ok(app.layer(cors))
}

pub async fn serve(cfg: ServiceConfig, addr: SocketAddr) -> Result<(), ApiError> {
    let svc = Arc::new(MapService::new(&cfg.store, &cfg.sessions)?);
    let app = router(svc, &cfg)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ApiError::Internal(format!("{addr}: {e}")))?;
    log::info!("listening on {addr}");
    axum::serve(listener, app)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))
}
