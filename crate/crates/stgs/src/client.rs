//! Streaming client: download, decode and playback as three pipelined stages.
//!
//! Playback of GOP `k` releases the download of GOP `k + 1`, so at most one GOP
//! is prefetched. The decode stage parses the prefetched segment and decodes its
//! keyframe (attribute images and weights) ahead of time; only the feature
//! video is decoded when playback reaches the GOP.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TryRecvError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use stgs_core::gaussian::CameraModel;
use stgs_core::pipeline;
use stgs_core::render::RenderedImage;
use stgs_core::segment::{assemble, decode_features, decode_keyframe, Keyframe, Segment};

use crate::abr::{abr_select, AbrDecision, BandwidthEstimate, DEFAULT_SAFETY};
use crate::error::{Error, Result};
use crate::imageio::decode_png;
use crate::manifest::StreamManifest;
use crate::scene::parse_pose;

/// Blocking HTTP access to one server.
#[derive(Clone, Debug)]
pub struct Http {
    client: reqwest::blocking::Client,
    pub base: String,
}

impl Http {
    /// `url` may be the server root or its `/manifest` URL.
    pub fn new(url: &str) -> Result<Self> {
        let base = url.trim_end_matches('/').trim_end_matches("/manifest").to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Http(e.to_string()))?;
        Ok(Self { client, base })
    }

    pub fn get(&self, path: &str) -> Result<Vec<u8>> {
        let url = format!("{}{path}", self.base);
        let resp = self.client.get(&url).send().map_err(|e| Error::Http(format!("{url}: {e}")))?;
        let status = resp.status();
        let body = resp.bytes().map_err(|e| Error::Http(format!("{url}: {e}")))?;
        if !status.is_success() {
            return Err(Error::Http(format!("{url}: {status}: {}", String::from_utf8_lossy(&body))));
        }
        Ok(body.to_vec())
    }

    pub fn manifest(&self) -> Result<StreamManifest> {
        Ok(serde_json::from_slice(&self.get("/manifest")?)?)
    }

    pub fn stats(&self) -> Result<crate::server::ServerStats> {
        Ok(serde_json::from_slice(&self.get("/stats")?)?)
    }

    pub fn render(&self, gop: usize, frame: usize, qp: u32, pose: Option<&str>) -> Result<RenderedImage> {
        let mut path = format!("/render?gop={gop}&frame={frame}&qp={qp}");
        if let Some(p) = pose {
            path.push_str("&pose=");
            path.push_str(&p.replace(' ', ""));
        }
        decode_png(&self.get(&path)?)
    }
}

#[derive(Clone)]
pub struct PlayConfig {
    pub url: String,
    /// Play only the first `gops` GOPs.
    pub gops: Option<usize>,
    /// Viewing pose (see [`parse_pose`]); defaults to the scene's last camera.
    pub pose: Option<String>,
    /// Fetch every GOP at this QP instead of adapting.
    pub pin_qp: Option<u32>,
    pub safety: f64,
    /// Hold each frame for `1 / fps` like a real player.
    pub pace: bool,
    pub render: bool,
    /// Compare frame 0 of every GOP against the server's `/render`.
    pub reference: bool,
    /// Called by the download stage before fetching each GOP.
    pub before_download: Option<Arc<dyn Fn(usize) + Send + Sync>>,
}

impl PlayConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            gops: None,
            pose: None,
            pin_qp: None,
            safety: DEFAULT_SAFETY,
            pace: true,
            render: true,
            reference: false,
            before_download: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GopReport {
    pub gop: usize,
    pub qp: u32,
    pub bytes: u64,
    pub download_ms: f64,
    pub keyframe_ms: f64,
    pub feature_ms: f64,
    pub render_ms: f64,
    /// Playback reached this GOP before it was decoded.
    pub stalls: u32,
    pub stall_ms: f64,
    pub stall_risk: bool,
    /// Throughput estimate the QP was chosen with (bytes/s), if any.
    pub estimate_bytes_per_sec: Option<f64>,
    pub retries: u32,
    pub psnr_vs_server: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlayReport {
    pub url: String,
    pub scene_id: String,
    pub version: String,
    pub fps: f64,
    pub ttff_ms: f64,
    pub total_stalls: u32,
    pub qp_trace: Vec<u32>,
    pub gops: Vec<GopReport>,
}

struct Downloaded {
    report: GopReport,
    bytes: Option<Vec<u8>>,
}

struct Prepared {
    report: GopReport,
    bytes: Vec<u8>,
    keyframe: Option<Keyframe>,
}

fn download_stage(
    http: Http,
    manifest: StreamManifest,
    cfg: PlayConfig,
    gops: usize,
    permits: Receiver<()>,
    out: SyncSender<Downloaded>,
) {
    let mut est = BandwidthEstimate::new(cfg.safety);
    for gop in 0..gops {
        if gop > 0 && permits.recv().is_err() {
            return;
        }
        if let Some(hook) = &cfg.before_download {
            hook(gop);
        }
        let decision = match cfg.pin_qp {
            Some(qp) => AbrDecision {
                qp,
                level: manifest.qp_ladder.iter().position(|l| l.qp == qp).unwrap_or(0),
                stall_risk: false,
            },
            None => abr_select(&est, &manifest.qp_ladder, manifest.fps),
        };
        let throughput = est.throughput();
        let mut report = GopReport {
            gop,
            qp: decision.qp,
            stall_risk: decision.stall_risk,
            estimate_bytes_per_sec: throughput.is_finite().then_some(throughput),
            ..Default::default()
        };
        let mut level = decision.level;
        let mut bytes = None;
        let mut last_err = String::new();
        'levels: while level < manifest.qp_ladder.len() {
            let qp = manifest.qp_ladder[level].qp;
            for attempt in 0..2 {
                let t0 = Instant::now();
                match http.get(&manifest.segment_uri(gop, qp)) {
                    Ok(b) => {
                        let secs = t0.elapsed().as_secs_f64();
                        est.add_sample(b.len() as u64, secs);
                        report.qp = qp;
                        report.bytes = b.len() as u64;
                        report.download_ms = secs * 1000.0;
                        bytes = Some(b);
                        break 'levels;
                    }
                    Err(e) => {
                        last_err = e.to_string();
                        if attempt == 0 {
                            report.retries += 1;
                        }
                    }
                }
            }
            level += 1;
        }
        if bytes.is_none() {
            report.error = Some(format!("download failed: {last_err}"));
        }
        if out.send(Downloaded { report, bytes }).is_err() {
            return;
        }
    }
}

fn decode_stage(input: Receiver<Downloaded>, out: SyncSender<Prepared>) {
    for d in input {
        let mut report = d.report;
        let Some(bytes) = d.bytes else {
            if out
                .send(Prepared {
                    report,
                    bytes: Vec::new(),
                    keyframe: None,
                })
                .is_err()
            {
                return;
            }
            continue;
        };
        let t0 = Instant::now();
        let keyframe = Segment::parse(&bytes).and_then(|s| decode_keyframe(&s));
        report.keyframe_ms = t0.elapsed().as_secs_f64() * 1000.0;
        let keyframe = match keyframe {
            Ok(k) => Some(k),
            Err(e) => {
                report.error = Some(format!("keyframe decode failed: {e}"));
                None
            }
        };
        if out.send(Prepared { report, bytes, keyframe }).is_err() {
            return;
        }
    }
}

fn quantize(img: &RenderedImage) -> RenderedImage {
    let rgb = img.rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
    RenderedImage::from_rgb(img.width, img.height, rgb).expect("same size")
}

fn view_camera(manifest: &StreamManifest, pose: Option<&str>) -> Result<CameraModel> {
    match pose {
        Some(p) => parse_pose(p, &manifest.cameras[0], &manifest.orbit).map_err(Error::Usage),
        None => manifest
            .cameras
            .last()
            .ok_or_else(|| Error::Manifest("scene has no cameras".into()))?
            .model(),
    }
}

/// Stream a scene and report per-GOP timings, QP choices and stalls.
pub fn play(cfg: &PlayConfig) -> Result<PlayReport> {
    let http = Http::new(&cfg.url)?;
    let start = Instant::now();
    let manifest = http.manifest()?;
    if manifest.qp_ladder.is_empty() {
        return Err(Error::Manifest("empty QP ladder".into()));
    }
    if let Some(qp) = cfg.pin_qp {
        if manifest.level(qp).is_none() {
            return Err(Error::Usage(format!("QP {qp} is not in the ladder")));
        }
    }
    let cam = view_camera(&manifest, cfg.pose.as_deref())?;
    let gops = cfg.gops.unwrap_or(manifest.gop_count).min(manifest.gop_count);
    let frame_time = Duration::from_secs_f64(1.0 / manifest.fps.max(1e-3));

    let (permit_tx, permit_rx) = sync_channel::<()>(1);
    let (dl_tx, dl_rx) = sync_channel::<Downloaded>(0);
    let (dec_tx, dec_rx) = sync_channel::<Prepared>(0);
    let downloader = {
        let (http, manifest, cfg) = (http.clone(), manifest.clone(), cfg.clone());
        std::thread::spawn(move || download_stage(http, manifest, cfg, gops, permit_rx, dl_tx))
    };
    let decoder = std::thread::spawn(move || decode_stage(dl_rx, dec_tx));

    let mut report = PlayReport {
        url: http.base.clone(),
        scene_id: manifest.scene_id.clone(),
        version: manifest.version.clone(),
        fps: manifest.fps,
        ..Default::default()
    };
    let mut first_frame = None;
    for gop in 0..gops {
        let t_wait = Instant::now();
        let (prepared, stalled) = match dec_rx.try_recv() {
            Ok(p) => (p, false),
            Err(TryRecvError::Empty) => match dec_rx.recv() {
                Ok(p) => (p, gop > 0),
                Err(_) => break,
            },
            Err(TryRecvError::Disconnected) => break,
        };
        let mut r = prepared.report;
        if stalled {
            r.stalls = 1;
            r.stall_ms = t_wait.elapsed().as_secs_f64() * 1000.0;
        }
        if gop + 1 < gops {
            let _ = permit_tx.send(());
        }
        let gop_start = Instant::now();
        if let Some(key) = prepared.keyframe {
            let t0 = Instant::now();
            let decoded = Segment::parse(&prepared.bytes).and_then(|s| {
                let features = decode_features(&s, &key, None)?;
                Ok(assemble(key, features))
            });
            r.feature_ms = t0.elapsed().as_secs_f64() * 1000.0;
            match decoded {
                Err(e) => r.error = Some(format!("feature decode failed: {e}")),
                Ok(d) => {
                    for frame in 0..manifest.gop_length {
                        if cfg.render {
                            let t0 = Instant::now();
                            let img = pipeline::render_frame(&d.model, frame, &cam)?;
                            r.render_ms += t0.elapsed().as_secs_f64() * 1000.0;
                            if frame == 0 && cfg.reference {
                                let server = http.render(gop, 0, r.qp, cfg.pose.as_deref())?;
                                r.psnr_vs_server = Some(quantize(&img).psnr(&server)?);
                            }
                        }
                        if first_frame.is_none() {
                            first_frame = Some(start.elapsed());
                        }
                        if cfg.pace {
                            let due = gop_start + frame_time * (frame as u32 + 1);
                            if let Some(d) = due.checked_duration_since(Instant::now()) {
                                std::thread::sleep(d);
                            }
                        }
                    }
                }
            }
        }
        report.total_stalls += r.stalls;
        report.qp_trace.push(r.qp);
        report.gops.push(r);
    }
    drop(dec_rx);
    drop(permit_tx);
    let _ = downloader.join();
    let _ = decoder.join();
    report.ttff_ms = first_frame.unwrap_or_else(|| start.elapsed()).as_secs_f64() * 1000.0;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtffReport {
    pub gop: usize,
    pub qp: u32,
    pub bytes: u64,
    pub download_ms: f64,
    pub keyframe_ms: f64,
    pub feature_ms: f64,
    pub render_ms: f64,
    pub total_ms: f64,
}

/// Cold start at GOP `gop`: fetch only that segment, decode it and render frame 0.
pub fn time_to_first_frame(http: &Http, manifest: &StreamManifest, gop: usize, qp: u32, pose: Option<&str>) -> Result<TtffReport> {
    let cam = view_camera(manifest, pose)?;
    let t0 = Instant::now();
    let bytes = http.get(&manifest.segment_uri(gop, qp))?;
    let t1 = Instant::now();
    let seg = Segment::parse(&bytes)?;
    let key = decode_keyframe(&seg)?;
    let t2 = Instant::now();
    let features = decode_features(&seg, &key, None)?;
    let model = assemble(key, features).model;
    let t3 = Instant::now();
    pipeline::render_frame(&model, 0, &cam)?;
    let t4 = Instant::now();
    let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1000.0;
    Ok(TtffReport {
        gop,
        qp,
        bytes: bytes.len() as u64,
        download_ms: ms(t0, t1),
        keyframe_ms: ms(t1, t2),
        feature_ms: ms(t2, t3),
        render_ms: ms(t3, t4),
        total_ms: ms(t0, t4),
    })
}
