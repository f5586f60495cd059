//! HTTP service for collecting traversability ratings from human annotators.
//!
//! Endpoints (all JSON unless noted; errors are `{"error": {"rule", "detail"}}`):
//!
//! - `GET /api/tasks?annotator=&robot=`: every instance for that robot, in task order;
//! - `GET /api/task/next?annotator=&robot=`: first task the annotator has not rated;
//! - `POST /api/annotations`: `{annotator_id, instance_id, robot_id, rating}`;
//!   the server fills the timestamp and acknowledges only after the record is
//!   synced to the store file;
//! - `GET /api/stats/agreement[?bin_width=]`: per-key std devs and histogram;
//! - `GET /api/export`: deduplicated store as JSON lines;
//! - `GET /media/images/<image_id>.png`, `GET /media/crops/<instance_id>.png`;
//! - everything else: the static UI directory, when configured.

mod handlers;

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::routing::{get, post};
use axum::Router;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use wadeable::dataset::{load_manifest, AnnotationStore, DatasetError, DatasetManifest};
use wadeable::extract::CropSpec;

pub use handlers::{AnnotationTask, ApiError, NextTask, SubmitRequest};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub dataset_root: PathBuf,
    /// Defaults to `annotations.jsonl` in the dataset root.
    pub store_path: Option<PathBuf>,
    /// Built annotation UI served at `/`.
    pub ui_dir: Option<PathBuf>,
    /// Shuffle each annotator's task order with this seed; manifest order when unset.
    pub shuffle_seed: Option<u64>,
    pub crop: CropSpec,
    pub bin_width: f64,
}

impl ServiceConfig {
    pub fn new(dataset_root: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            dataset_root: dataset_root.into(),
            store_path: None,
            ui_dir: None,
            shuffle_seed: None,
            crop: CropSpec::default(),
            bin_width: 0.25,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("server: {0}")]
    Serve(std::io::Error),
}

pub struct AppState {
    pub manifest: DatasetManifest,
    pub store: AnnotationStore,
    pub config: ServiceConfig,
}

impl AppState {
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        let manifest = load_manifest(&config.dataset_root)?;
        let store_path = config
            .store_path
            .clone()
            .unwrap_or_else(|| manifest.annotations_path());
        let store = AnnotationStore::open(store_path)?;
        Ok(AppState {
            manifest,
            store,
            config,
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let ui_dir = state.config.ui_dir.clone();
    let api = Router::new()
        .route("/api/tasks", get(handlers::tasks))
        .route("/api/task/next", get(handlers::next_task))
        .route("/api/annotations", post(handlers::submit))
        .route("/api/stats/agreement", get(handlers::agreement))
        .route("/api/export", get(handlers::export))
        .route("/media/images/{file}", get(handlers::image))
        .route("/media/crops/{file}", get(handlers::crop));
    let app = match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(handlers::placeholder)),
    };
    app.with_state(state)
}

pub async fn bind(addr: &str) -> Result<TcpListener, ServiceError> {
    TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind {
        addr: addr.to_string(),
        source,
    })
}

/// Serve until `shutdown` resolves. Every acknowledged annotation is already
/// on disk, so shutdown only has to drain in-flight requests.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    tracing::info!(?addr, "annotation service listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(ServiceError::Serve)
}
