//! Blind-test HTTP service.
//!
//! Sessions live as one JSON file each under a data directory. Mutations of
//! a session are serialized behind a per-session lock; reads load whatever
//! file is on disk, which atomic replacement keeps consistent.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower_http::services::ServeDir;

use inkrestore::blindtest::wire::{Answer, AnswerRecorded, CreateSession, ErrorBody, ItemList, SessionCreated};
use inkrestore::blindtest::{self, BlindSession, Judgment, SessionStore};
use inkrestore::raster::{load_raster, RasterImage};
use inkrestore::Error;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub clean_dir: PathBuf,
    pub corrected_dir: PathBuf,
    pub data_dir: PathBuf,
    /// Static front-end assets served at `/`, if any.
    pub ui_dir: Option<PathBuf>,
    /// Shared bearer token; `None` leaves the API open.
    pub token: Option<String>,
    pub default_items: usize,
    pub default_patch: usize,
}

struct Inner {
    cfg: ServeConfig,
    store: SessionStore,
    clean_pool: Vec<String>,
    corrected_pool: Vec<String>,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(cfg: ServeConfig) -> inkrestore::Result<Self> {
        let store = SessionStore::open(&cfg.data_dir)?;
        let clean_pool = blindtest::list_patches(&cfg.clean_dir)?;
        let corrected_pool = blindtest::list_patches(&cfg.corrected_dir)?;
        tracing::info!(
            clean = clean_pool.len(),
            corrected = corrected_pool.len(),
            "blind-test pools loaded"
        );
        Ok(AppState(Arc::new(Inner {
            cfg,
            store,
            clean_pool,
            corrected_pool,
            locks: Mutex::new(HashMap::new()),
        })))
    }

    fn lock_for(&self, session_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.0.locks.lock().expect("lock table poisoned");
        locks.entry(session_id.to_string()).or_default().clone()
    }

    fn authorize(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        let Some(expected) = &self.0.cfg.token else {
            return Ok(());
        };
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given == Some(expected.as_str()) {
            Ok(())
        } else {
            Err(ApiError::unauthorized())
        }
    }
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn unauthorized() -> Self {
        ApiError {
            status: StatusCode::UNAUTHORIZED,
            body: ErrorBody {
                error: "unauthorized".into(),
                message: "missing or wrong bearer token".into(),
            },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Error::Incomplete { .. } => (StatusCode::CONFLICT, "incomplete"),
            Error::Config(_) | Error::Input(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(error = %e, "request failed");
        }
        ApiError {
            status,
            body: ErrorBody {
                error: code.into(),
                message: e.to_string(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> inkrestore::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::from(Error::Input(format!("worker failed: {e}"))))?
        .map_err(ApiError::from)
}

fn load(state: &AppState, session_id: &str) -> inkrestore::Result<BlindSession> {
    state.0.store.load(session_id)
}

async fn create_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    state.authorize(&headers)?;
    let n = req.n.unwrap_or(state.0.cfg.default_items);
    let patch_size = req.patch_size.unwrap_or(state.0.cfg.default_patch);
    let session_id = uuid::Uuid::new_v4().simple().to_string();
    // Without an explicit seed the session id supplies one; it is stored either way.
    let seed = req.seed.unwrap_or_else(|| uuid::Uuid::parse_str(&session_id).map(|u| u.as_u64_pair().0).unwrap_or(0));
    let inner = state.0.clone();
    let sid = session_id.clone();
    blocking(move || {
        let s = blindtest::create_session(&sid, &inner.clean_pool, &inner.corrected_pool, n, patch_size, seed, now())?;
        inner.store.save(&s)
    })
    .await?;
    tracing::info!(%session_id, n, patch_size, seed, "session created");
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id,
            n,
            patch_size,
            seed,
        }),
    ))
}

async fn session_view(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<impl IntoResponse> {
    state.authorize(&headers)?;
    Ok(Json(load(&state, &id)?.view()))
}

async fn session_items(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<ItemList>> {
    state.authorize(&headers)?;
    let s = load(&state, &id)?;
    Ok(Json(ItemList {
        session_id: s.session_id,
        item_ids: s.items.into_iter().map(|i| i.item_id).collect(),
    }))
}

/// Center crop to at most `size` on each side.
fn center_crop(img: RasterImage, size: usize) -> inkrestore::Result<RasterImage> {
    let (w, h) = (img.width().min(size), img.height().min(size));
    if (w, h) == (img.width(), img.height()) {
        return Ok(img);
    }
    img.crop((img.width() - w) / 2, (img.height() - h) / 2, w, h)
}

async fn item_image(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(item_id): UrlPath<String>,
) -> ApiResult<Response> {
    state.authorize(&headers)?;
    let session_id = blindtest::session_of_item(&item_id)
        .ok_or_else(|| Error::NotFound(format!("item `{item_id}`")))?
        .to_string();
    let inner = state.0.clone();
    let png = blocking(move || {
        let s = inner.store.load(&session_id)?;
        let item = s.item(&item_id)?;
        let dir = match item.truth {
            Judgment::OriginalClean => &inner.cfg.clean_dir,
            Judgment::Corrected => &inner.cfg.corrected_dir,
        };
        center_crop(load_raster(&dir.join(&item.patch))?, s.patch_size)?.to_png_bytes()
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], png).into_response())
}

async fn answer_item(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(item_id): UrlPath<String>,
    Json(req): Json<Answer>,
) -> ApiResult<Json<AnswerRecorded>> {
    state.authorize(&headers)?;
    let session_id = blindtest::session_of_item(&item_id)
        .ok_or_else(|| Error::NotFound(format!("item `{item_id}`")))?
        .to_string();
    let lock = state.lock_for(&session_id);
    let _guard = lock.lock().await;
    let inner = state.0.clone();
    let id = item_id.clone();
    let s = blocking(move || {
        let mut s = inner.store.load(&session_id)?;
        s.record_answer(&id, req.answer, now())?;
        inner.store.save(&s)?;
        Ok(s)
    })
    .await?;
    Ok(Json(AnswerRecorded {
        item_id,
        answered: s.answered(),
        n: s.items.len(),
        complete: s.is_complete(),
    }))
}

#[derive(Deserialize)]
struct ReportQuery {
    #[serde(default)]
    partial: bool,
}

async fn session_report(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<impl IntoResponse> {
    state.authorize(&headers)?;
    Ok(Json(load(&state, &id)?.report(q.partial)?))
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(session_view))
        .route("/sessions/:id/items", get(session_items))
        .route("/sessions/:id/report", get(session_report))
        .route("/items/:id/image", get(item_image))
        .route("/items/:id/answer", post(answer_item))
        .route("/health", get(|| async { "ok" }));
    let ui = state.0.cfg.ui_dir.clone();
    let app = api.with_state(state);
    match ui {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Binds `addr` (port 0 picks a free one) and serves until `shutdown` resolves.
pub async fn serve(
    cfg: ServeConfig,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> inkrestore::Result<()> {
    let (bound, server) = bind(cfg, addr).await?;
    tracing::info!(%bound, "blind-test service listening");
    server.with_graceful_shutdown(shutdown).await
}

pub struct Server {
    listener: tokio::net::TcpListener,
    app: Router,
}

impl Server {
    pub async fn with_graceful_shutdown(
        self,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> inkrestore::Result<()> {
        axum::serve(self.listener, self.app)
            .with_graceful_shutdown(shutdown)
            .await
            .map_err(|e| Error::Input(format!("server failed: {e}")))
    }
}

pub async fn bind(cfg: ServeConfig, addr: SocketAddr) -> inkrestore::Result<(SocketAddr, Server)> {
    let state = AppState::new(cfg)?;
    let bind_err = |e: std::io::Error| Error::Input(format!("cannot listen on {addr}: {e}"));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(bind_err)?;
    let bound = listener.local_addr().map_err(bind_err)?;
    Ok((
        bound,
        Server {
            listener,
            app: router(state),
        },
    ))
}
