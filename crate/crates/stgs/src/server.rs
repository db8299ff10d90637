//! HTTP segment server with a render endpoint.
//!
//! | route | response |
//! |---|---|
//! | `GET /manifest` | [`StreamManifest`] JSON |
//! | `GET /segment/{gop}/{qp}` | segment bytes; `Range`, `ETag`, `If-None-Match` |
//! | `GET /render?gop&frame&qp&pose&seq` | PNG; `x-render-ms`, `x-render-seq` echoes `seq` |
//! | `GET /stats` | [`ServerStats`] JSON |
//! | `GET /viewer/...` | static files, when configured |
//!
//! Every response carries `x-scene-version`. Unknown GOP or QP is 404; a bad
//! frame index or pose is 400 with the reason as plain text.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use bytes::Bytes;
use serde::Serialize;
use sha2::{Digest, Sha256};
use stgs_core::gaussian::{CameraModel, StreamModel};
use stgs_core::pipeline;
use stgs_core::segment::decode_gop;
use tower_http::services::ServeDir;
use tower_http::set_header::SetResponseHeaderLayer;

use crate::error::{Error, IoContext, Result};
use crate::imageio::encode_png;
use crate::manifest::{build_manifest, segment_file, StreamManifest};
use crate::scene::parse_pose;
use crate::throttle::{Throttle, CHUNK};

pub const VERSION_HEADER: &str = "x-scene-version";

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub scene_dir: PathBuf,
    pub bind: SocketAddr,
    /// Bytes per second for segment bodies; `None` is unlimited.
    pub throttle_bytes_per_sec: Option<f64>,
    pub viewer_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, serde::Deserialize)]
pub struct ServerStats {
    pub bytes_served: u64,
    pub segments_served: u64,
    pub renders: u64,
    pub render_ms_total: f64,
    pub render_ms_mean: f64,
    pub decodes: u64,
    pub decode_ms_total: f64,
    /// Segment requests per `"gop/qp"`.
    pub segment_requests: BTreeMap<String, u64>,
    pub throttle_bytes_per_sec: Option<f64>,
}

type ModelCell = Arc<OnceLock<std::result::Result<Arc<StreamModel>, String>>>;

pub struct AppState {
    manifest: StreamManifest,
    manifest_json: Bytes,
    segments: HashMap<(usize, u32), (Bytes, String)>,
    models: Mutex<HashMap<(usize, u32), ModelCell>>,
    default_camera: CameraModel,
    throttle: Arc<Throttle>,
    bytes_served: AtomicU64,
    segments_served: AtomicU64,
    renders: AtomicU64,
    render_us: AtomicU64,
    decodes: AtomicU64,
    decode_us: AtomicU64,
    requests: Mutex<BTreeMap<String, u64>>,
}

impl AppState {
    /// Load the manifest and every segment of `dir` into memory.
    pub fn load(dir: &std::path::Path, throttle: Arc<Throttle>) -> Result<Self> {
        let manifest = build_manifest(dir)?;
        let mut segments = HashMap::new();
        for level in &manifest.qp_ladder {
            for gop in 0..manifest.gop_count {
                let p = segment_file(dir, gop, level.qp);
                let bytes = std::fs::read(&p).at(&p)?;
                let etag = format!("\"{}\"", hex::encode(&Sha256::digest(&bytes)[..12]));
                segments.insert((gop, level.qp), (Bytes::from(bytes), etag));
            }
        }
        let cams = &manifest.cameras;
        if cams.is_empty() {
            return Err(Error::Manifest("scene has no cameras".into()));
        }
        let default_camera = cams[cams.len() - 1].model()?;
        Ok(Self {
            manifest_json: Bytes::from(serde_json::to_vec(&manifest)?),
            manifest,
            segments,
            models: Mutex::new(HashMap::new()),
            default_camera,
            throttle,
            bytes_served: AtomicU64::new(0),
            segments_served: AtomicU64::new(0),
            renders: AtomicU64::new(0),
            render_us: AtomicU64::new(0),
            decodes: AtomicU64::new(0),
            decode_us: AtomicU64::new(0),
            requests: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn manifest(&self) -> &StreamManifest {
        &self.manifest
    }

    pub fn stats(&self) -> ServerStats {
        let renders = self.renders.load(Ordering::Relaxed);
        let render_ms_total = self.render_us.load(Ordering::Relaxed) as f64 / 1000.0;
        ServerStats {
            bytes_served: self.bytes_served.load(Ordering::Relaxed),
            segments_served: self.segments_served.load(Ordering::Relaxed),
            renders,
            render_ms_total,
            render_ms_mean: if renders > 0 { render_ms_total / renders as f64 } else { 0.0 },
            decodes: self.decodes.load(Ordering::Relaxed),
            decode_ms_total: self.decode_us.load(Ordering::Relaxed) as f64 / 1000.0,
            segment_requests: self.requests.lock().unwrap().clone(),
            throttle_bytes_per_sec: self.throttle.rate(),
        }
    }

    /// Decoded model of one segment; decoded once per `(gop, qp)` even under concurrent requests.
    fn model(&self, gop: usize, qp: u32) -> std::result::Result<Arc<StreamModel>, String> {
        let cell = self.models.lock().unwrap().entry((gop, qp)).or_default().clone();
        cell.get_or_init(|| {
            let t0 = Instant::now();
            let (bytes, _) = &self.segments[&(gop, qp)];
            let out = decode_gop(bytes).map(|d| Arc::new(d.model)).map_err(|e| e.to_string());
            self.decodes.fetch_add(1, Ordering::Relaxed);
            self.decode_us.fetch_add(t0.elapsed().as_micros() as u64, Ordering::Relaxed);
            out
        })
        .clone()
    }
}

fn text(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, [(header::CONTENT_TYPE, "text/plain; charset=utf-8")], msg.into()).into_response()
}

pub fn router(state: Arc<AppState>, viewer_dir: Option<PathBuf>) -> Router {
    let version = HeaderValue::from_str(&state.manifest.version).expect("hex version is a valid header");
    let mut app = Router::new()
        .route("/manifest", get(manifest_handler))
        .route("/segment/{gop}/{qp}", get(segment_handler))
        .route("/render", get(render_handler))
        .route("/stats", get(stats_handler));
    if let Some(dir) = viewer_dir {
        app = app.nest_service("/viewer", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    app.fallback(|| async { text(StatusCode::NOT_FOUND, "not found") })
        .with_state(state)
        .layer(SetResponseHeaderLayer::overriding(HeaderName::from_static(VERSION_HEADER), version))
}

async fn manifest_handler(State(st): State<Arc<AppState>>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], st.manifest_json.clone()).into_response()
}

async fn stats_handler(State(st): State<Arc<AppState>>) -> Json<ServerStats> {
    Json(st.stats())
}

/// Parse a single `bytes=` range against a body of `len` bytes (inclusive end).
pub fn parse_range(value: &str, len: usize) -> Option<(usize, usize)> {
    let spec = value.trim().strip_prefix("bytes=")?;
    if spec.contains(',') || len == 0 {
        return None;
    }
    let (a, b) = spec.split_once('-')?;
    let (a, b) = (a.trim(), b.trim());
    let (start, end) = if a.is_empty() {
        let n: usize = b.parse().ok()?;
        if n == 0 {
            return None;
        }
        (len.saturating_sub(n), len - 1)
    } else {
        let s: usize = a.parse().ok()?;
        let e = if b.is_empty() { len - 1 } else { b.parse::<usize>().ok()?.min(len - 1) };
        (s, e)
    };
    (start <= end && start < len).then_some((start, end))
}

async fn segment_handler(State(st): State<Arc<AppState>>, Path((gop, qp)): Path<(String, String)>, headers: HeaderMap) -> Response {
    let key = match (gop.parse::<usize>(), qp.parse::<u32>()) {
        (Ok(g), Ok(q)) if st.segments.contains_key(&(g, q)) => (g, q),
        _ => return text(StatusCode::NOT_FOUND, format!("no segment for gop {gop}, qp {qp}")),
    };
    let (bytes, etag) = &st.segments[&key];
    *st.requests.lock().unwrap().entry(format!("{}/{}", key.0, key.1)).or_default() += 1;
    if headers.get(header::IF_NONE_MATCH).and_then(|v| v.to_str().ok()) == Some(etag.as_str()) {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, etag.clone())]).into_response();
    }
    let len = bytes.len();
    let (status, body, range) = match headers.get(header::RANGE).map(|v| v.to_str().unwrap_or("")) {
        None => (StatusCode::OK, bytes.clone(), None),
        Some(r) => match parse_range(r, len) {
            Some((s, e)) => (StatusCode::PARTIAL_CONTENT, bytes.slice(s..=e), Some(format!("bytes {s}-{e}/{len}"))),
            None => {
                return (
                    StatusCode::RANGE_NOT_SATISFIABLE,
                    [(header::CONTENT_RANGE, format!("bytes */{len}"))],
                    "unsatisfiable range",
                )
                    .into_response()
            }
        },
    };
    st.segments_served.fetch_add(1, Ordering::Relaxed);
    let body_len = body.len();
    let state = st.clone();
    let stream = futures_util::stream::unfold(0usize, move |off| {
        let body = body.clone();
        let state = state.clone();
        async move {
            if off >= body.len() {
                return None;
            }
            let chunk = body.slice(off..(off + CHUNK).min(body.len()));
            state.throttle.acquire(chunk.len()).await;
            state.bytes_served.fetch_add(chunk.len() as u64, Ordering::Relaxed);
            let next = off + chunk.len();
            Some((Ok::<Bytes, std::io::Error>(chunk), next))
        }
    });
    let mut resp = Response::new(Body::from_stream(stream));
    *resp.status_mut() = status;
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    h.insert(header::CONTENT_LENGTH, HeaderValue::from(body_len));
    h.insert(header::ACCEPT_RANGES, HeaderValue::from_static("bytes"));
    h.insert(header::ETAG, HeaderValue::from_str(etag).unwrap());
    if let Some(r) = range {
        h.insert(header::CONTENT_RANGE, HeaderValue::from_str(&r).unwrap());
    }
    resp
}

async fn render_handler(State(st): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> Response {
    let m = &st.manifest;
    let gop = match q.get("gop").map(|s| s.parse::<usize>()) {
        Some(Ok(g)) => g,
        Some(Err(_)) => return text(StatusCode::BAD_REQUEST, "gop must be a non-negative integer"),
        None => return text(StatusCode::BAD_REQUEST, "missing gop"),
    };
    let frame = match q.get("frame").map(|s| s.parse::<usize>()) {
        Some(Ok(f)) => f,
        Some(Err(_)) => return text(StatusCode::BAD_REQUEST, "frame must be a non-negative integer"),
        None => return text(StatusCode::BAD_REQUEST, "missing frame"),
    };
    let qp = match q.get("qp").map(|s| s.parse::<u32>()) {
        None => m.qp_ladder[0].qp,
        Some(Ok(qp)) => qp,
        Some(Err(_)) => return text(StatusCode::BAD_REQUEST, "qp must be an integer"),
    };
    if gop >= m.gop_count || m.level(qp).is_none() {
        return text(StatusCode::NOT_FOUND, format!("no segment for gop {gop}, qp {qp}"));
    }
    if frame >= m.gop_length {
        return text(StatusCode::BAD_REQUEST, format!("frame {frame} outside 0..{}", m.gop_length));
    }
    let cam = match q.get("pose") {
        None => st.default_camera.clone(),
        Some(p) => match parse_pose(p, &m.cameras[0], &m.orbit) {
            Ok(c) => c,
            Err(reason) => return text(StatusCode::BAD_REQUEST, format!("malformed pose: {reason}")),
        },
    };
    let seq = q.get("seq").cloned();
    let state = st.clone();
    let job = tokio::task::spawn_blocking(move || -> std::result::Result<(Vec<u8>, f64), String> {
        let model = state.model(gop, qp)?;
        let t0 = Instant::now();
        let img = pipeline::render_frame(&model, frame, &cam).map_err(|e| e.to_string())?;
        let elapsed = t0.elapsed();
        state.renders.fetch_add(1, Ordering::Relaxed);
        state.render_us.fetch_add(elapsed.as_micros() as u64, Ordering::Relaxed);
        let png = encode_png(&img).map_err(|e| e.to_string())?;
        Ok((png, elapsed.as_secs_f64() * 1000.0))
    });
    match job.await {
        Ok(Ok((png, ms))) => {
            let mut resp = Response::new(Body::from(png));
            let h = resp.headers_mut();
            h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
            h.insert(header::CACHE_CONTROL, HeaderValue::from_static("no-store"));
            h.insert("x-render-ms", HeaderValue::from_str(&format!("{ms:.3}")).unwrap());
            if let Some(s) = seq.and_then(|s| HeaderValue::from_str(&s).ok()) {
                h.insert("x-render-seq", s);
            }
            resp
        }
        Ok(Err(e)) => text(StatusCode::UNPROCESSABLE_ENTITY, format!("render failed: {e}")),
        Err(e) => text(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// A server running on its own runtime thread.
pub struct ServerHandle {
    pub addr: SocketAddr,
    state: Arc<AppState>,
    throttle: Arc<Throttle>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn set_throttle(&self, bytes_per_sec: Option<f64>) {
        self.throttle.set_rate(bytes_per_sec);
    }

    /// Shared throttle, for changing the rate from another thread.
    pub fn throttle(&self) -> Arc<Throttle> {
        self.throttle.clone()
    }

    pub fn stats(&self) -> ServerStats {
        self.state.stats()
    }

    pub fn manifest(&self) -> &StreamManifest {
        self.state.manifest()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| Error::Http(e.to_string()))
}

/// Bind and start serving in a background thread.
pub fn spawn(cfg: &ServerConfig) -> Result<ServerHandle> {
    let throttle = Arc::new(Throttle::new(cfg.throttle_bytes_per_sec));
    let state = Arc::new(AppState::load(&cfg.scene_dir, throttle.clone())?);
    let listener = std::net::TcpListener::bind(cfg.bind).map_err(|e| Error::Http(format!("bind {}: {e}", cfg.bind)))?;
    listener.set_nonblocking(true).map_err(|e| Error::Http(e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| Error::Http(e.to_string()))?;
    let app = router(state.clone(), cfg.viewer_dir.clone());
    let rt = runtime()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle {
        addr,
        state,
        throttle,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serve in the foreground until the process is stopped.
pub fn serve_forever(cfg: &ServerConfig, on_ready: impl FnOnce(SocketAddr)) -> Result<()> {
    let handle = spawn(cfg)?;
    on_ready(handle.addr);
    loop {
        std::thread::park();
    }
}
