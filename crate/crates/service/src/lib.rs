//! Local HTTP session service for interactive landmark editing and fitting.
//!
//! Sessions live in plain directories under a root: the uploaded image, every landmark
//! version, and every fit result with its mesh and overlay.

mod session;

pub use session::{SessionStatus, Transition, TransitionError};

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine as _;
use caricature_core::io::{format_mesh, LandmarkDocument, MeshDocument};
use caricature_core::pipeline::{
    draw_overlay, encode_png, fit_caricature, FitConfig, ResultDocument,
};
use caricature_core::{DeformBasis, LandmarkSpec, LANDMARK_COUNT};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const SESSION_SCHEMA: &str = "session/v1";
pub const RESULT_ENVELOPE_SCHEMA: &str = "session-result/v1";

/// Hook run on the worker thread right before a fit; lets tests hold a fit in flight.
pub type FitHook = Arc<dyn Fn() + Send + Sync>;

/// Shared service state.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    root: PathBuf,
    basis: Arc<DeformBasis<f64>>,
    config: FitConfig<f64>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    counter: AtomicU64,
    fit_hook: Option<FitHook>,
}

struct Session {
    id: String,
    dir: PathBuf,
    status: SessionStatus,
    version: u64,
    landmarks: LandmarkDocument,
    image: image::RgbImage,
    result: Option<StoredResult>,
    result_version: u64,
    error: Option<String>,
}

#[derive(Clone)]
struct StoredResult {
    version: u64,
    landmark_version: u64,
    document: ResultDocument,
    mesh: MeshDocument,
    obj: String,
    overlay: Vec<u8>,
}

/// Snapshot returned by `GET /sessions/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDocument {
    pub schema: String,
    pub id: String,
    pub status: SessionStatus,
    pub version: u64,
    pub result_version: Option<u64>,
    pub error: Option<String>,
    pub landmarks: LandmarkDocument,
}

/// Body of `POST /sessions`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    /// PNG or JPEG bytes, standard base64.
    pub image_base64: String,
    pub landmarks: LandmarkDocument,
}

/// Optional body of `POST /sessions/{id}/fit`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOverrides {
    pub lambda: Option<f64>,
    pub iterations: Option<usize>,
    pub epsilon: Option<f64>,
    pub tie_weights: Option<bool>,
}

/// Body of a successful `GET /sessions/{id}/result`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEnvelope {
    pub schema: String,
    pub status: SessionStatus,
    pub result_version: u64,
    pub landmark_version: u64,
    pub result: ResultDocument,
    pub mesh: MeshDocument,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session '{id}'"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

impl AppState {
    /// Sessions are stored under `root`, which is created if missing.
    pub fn new(
        root: impl Into<PathBuf>,
        basis: DeformBasis<f64>,
        config: FitConfig<f64>,
    ) -> std::io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self {
            inner: Arc::new(Inner {
                root,
                basis: Arc::new(basis),
                config,
                sessions: Mutex::new(HashMap::new()),
                counter: AtomicU64::new(0),
                fit_hook: None,
            }),
        })
    }

    pub fn with_fit_hook(self, hook: FitHook) -> Self {
        let inner = Arc::try_unwrap(self.inner)
            .unwrap_or_else(|_| panic!("fit hook must be installed before sharing the state"));
        Self {
            inner: Arc::new(Inner {
                fit_hook: Some(hook),
                ..inner
            }),
        }
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.inner
            .sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    fn next_id(&self) -> String {
        let n = self.inner.counter.fetch_add(1, Ordering::Relaxed);
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        format!("{:012x}{:04x}", nanos & 0xffff_ffff_ffff, n & 0xffff)
    }

    fn check_landmarks(&self, doc: &LandmarkDocument) -> ApiResult<LandmarkSpec<f64>> {
        doc.validate(Some(LANDMARK_COUNT))
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
        let spec = LandmarkSpec::from_document(doc)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
        spec.validate_for(&self.inner.basis.reference)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
        Ok(spec)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/landmarks", put(update_landmarks))
        .route("/sessions/{id}/fit", post(run_fit))
        .route("/sessions/{id}/result", get(get_result))
        .route("/sessions/{id}/mesh.obj", get(get_mesh))
        .route("/sessions/{id}/overlay.png", get(get_overlay))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: std::net::SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn write_json(path: &Path, value: &impl Serialize) -> ApiResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(ApiError::internal)?;
    std::fs::write(path, text).map_err(ApiError::internal)
}

fn snapshot(s: &Session) -> SessionDocument {
    SessionDocument {
        schema: SESSION_SCHEMA.into(),
        id: s.id.clone(),
        status: s.status,
        version: s.version,
        result_version: s.result.as_ref().map(|r| r.version),
        error: s.error.clone(),
        landmarks: s.landmarks.clone(),
    }
}

fn persist(s: &Session) -> ApiResult<()> {
    write_json(&s.dir.join("session.json"), &snapshot(s))
}

async fn create_session(
    State(state): State<AppState>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: CreateSession = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("malformed session document: {e}"),
        )
    })?;
    state.check_landmarks(&req.landmarks)?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(req.image_base64.as_bytes())
        .map_err(|e| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("image is not valid base64: {e}"),
            )
        })?;
    let format = image::guess_format(&bytes)
        .ok()
        .filter(|f| matches!(f, image::ImageFormat::Png | image::ImageFormat::Jpeg))
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "image must be PNG or JPEG",
            )
        })?;
    let img = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| {
            ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                format!("undecodable image: {e}"),
            )
        })?
        .to_rgb8();
    let id = state.next_id();
    let dir = state.inner.root.join(&id);
    std::fs::create_dir_all(dir.join("results")).map_err(ApiError::internal)?;
    let image_file = if format == image::ImageFormat::Png {
        "image.png"
    } else {
        "image.jpg"
    };
    std::fs::write(dir.join(image_file), &bytes).map_err(ApiError::internal)?;
    write_json(&dir.join("landmarks_v1.json"), &req.landmarks)?;
    let session = Session {
        id: id.clone(),
        dir,
        status: SessionStatus::Idle,
        version: 1,
        landmarks: req.landmarks,
        image: img,
        result: None,
        result_version: 0,
        error: None,
    };
    persist(&session)?;
    let doc = snapshot(&session);
    state
        .inner
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(doc)))
}

async fn get_session(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<SessionDocument>> {
    let s = state.session(&id)?;
    let s = s.lock().expect("session poisoned");
    Ok(Json(snapshot(&s)))
}

async fn update_landmarks(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<SessionDocument>> {
    let s = state.session(&id)?;
    let doc: LandmarkDocument = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("malformed landmark document: {e}"),
        )
    })?;
    let mut s = s.lock().expect("session poisoned");
    if !s.status.accepts_edits() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "landmarks are locked while a fit is running",
        ));
    }
    state.check_landmarks(&doc)?;
    let next = s.version + 1;
    let tmp = s.dir.join(format!("landmarks_v{next}.json.tmp"));
    write_json(&tmp, &doc)?;
    std::fs::rename(&tmp, s.dir.join(format!("landmarks_v{next}.json")))
        .map_err(ApiError::internal)?;
    s.landmarks = doc;
    s.version = next;
    persist(&s)?;
    Ok(Json(snapshot(&s)))
}

async fn run_fit(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let handle = state.session(&id)?;
    let overrides: FitOverrides = if body.iter().all(|b| b.is_ascii_whitespace()) {
        FitOverrides::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("malformed fit overrides: {e}"),
            )
        })?
    };
    let mut cfg = state.inner.config.clone();
    if let Some(v) = overrides.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = overrides.iterations {
        cfg.max_iterations = v;
    }
    if let Some(v) = overrides.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = overrides.tie_weights {
        cfg.tie_weights = v;
    }
    cfg.validate()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;

    let (lms, image, landmark_version, result_version) = {
        let mut s = handle.lock().expect("session poisoned");
        s.status = s
            .status
            .apply(Transition::StartFit)
            .map_err(|e| ApiError::new(StatusCode::CONFLICT, e.to_string()))?;
        s.error = None;
        s.result_version += 1;
        persist(&s)?;
        let lms = LandmarkSpec::from_document(&s.landmarks).map_err(ApiError::internal)?;
        (lms, s.image.clone(), s.version, s.result_version)
    };
    let worker_state = state.clone();
    let worker_handle = handle.clone();
    tokio::task::spawn_blocking(move || {
        if let Some(hook) = &worker_state.inner.fit_hook {
            hook();
        }
        let outcome = fit_caricature(&worker_state.inner.basis, &lms, &cfg).and_then(|res| {
            let document = res.to_document(&lms);
            let overlay = encode_png(&draw_overlay(&image, &lms.points, &res.reprojected(&lms)))?;
            Ok(StoredResult {
                version: result_version,
                landmark_version,
                document,
                mesh: MeshDocument::from_mesh(&res.mesh),
                obj: format_mesh(&res.mesh),
                overlay,
            })
        });
        let mut s = worker_handle.lock().expect("session poisoned");
        match outcome {
            Ok(stored) => {
                let dir = s.dir.join("results");
                let files = (|| -> ApiResult<()> {
                    write_json(
                        &dir.join(format!("result_v{result_version}.json")),
                        &stored.document,
                    )?;
                    std::fs::write(dir.join(format!("mesh_v{result_version}.obj")), &stored.obj)
                        .map_err(ApiError::internal)?;
                    std::fs::write(
                        dir.join(format!("overlay_v{result_version}.png")),
                        &stored.overlay,
                    )
                    .map_err(ApiError::internal)?;
                    Ok(())
                })();
                if let Err(e) = files {
                    log::warn!("could not persist result for session {}: {:?}", s.id, e);
                }
                s.result = Some(stored);
                s.status = s
                    .status
                    .apply(Transition::Succeed)
                    .unwrap_or(SessionStatus::Done);
            }
            Err(e) => {
                s.error = Some(e.to_string());
                s.status = s
                    .status
                    .apply(Transition::Fail)
                    .unwrap_or(SessionStatus::Failed);
            }
        }
        if let Err(e) = persist(&s) {
            log::warn!("could not persist session {}: {:?}", s.id, e);
        }
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(
            json!({ "id": id, "status": SessionStatus::Fitting, "result_version": result_version }),
        ),
    ))
}

fn latest_result(state: &AppState, id: &str) -> ApiResult<(SessionStatus, StoredResult)> {
    let s = state.session(id)?;
    let s = s.lock().expect("session poisoned");
    match &s.result {
        Some(r) => Ok((s.status, r.clone())),
        None => Err(ApiError {
            status: StatusCode::NOT_FOUND,
            body: json!({ "status": s.status, "error": "no result", "diagnostic": s.error }),
        }),
    }
}

async fn get_result(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<ResultEnvelope>> {
    let (status, r) = latest_result(&state, &id)?;
    Ok(Json(ResultEnvelope {
        schema: RESULT_ENVELOPE_SCHEMA.into(),
        status,
        result_version: r.version,
        landmark_version: r.landmark_version,
        result: r.document,
        mesh: r.mesh,
    }))
}

async fn get_mesh(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let (_, r) = latest_result(&state, &id)?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], r.obj).into_response())
}

async fn get_overlay(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let (_, r) = latest_result(&state, &id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], r.overlay).into_response())
}
