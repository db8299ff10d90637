//! Multi-GOP training runs: scene loading, JSON-lines metrics and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use stgs_core::synth::{SceneSpec, SyntheticScene};
use stgs_core::train::{train_gop_with, IterationMetrics, Stage, TrainConfig, TrainData, TrainOutput};

use crate::checkpoint::write_checkpoint;
use crate::error::{Error, IoContext, Result};
use crate::scene::{spec_hash, CameraJson, Orbit, SceneCache, SceneMeta, SceneSpecJson};

/// Append-only JSON-lines log.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path).at(path)?;
        Ok(Self {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").at(&self.path)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().at(&self.path)
    }
}

pub fn metrics_record(gop: usize, m: &IterationMetrics) -> serde_json::Value {
    let l = &m.losses;
    let lr: serde_json::Map<String, serde_json::Value> = m.learning_rates.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    json!({
        "gop": gop,
        "stage": match m.stage { Stage::Coarse => "coarse", Stage::Main => "main" },
        "iteration": m.iteration,
        "frame": m.frame,
        "camera": m.camera,
        "losses": {
            "reconstruction": l.reconstruction,
            "aux_ssim": l.aux_ssim,
            "spatial": l.spatial,
            "temporal": l.temporal,
            "opacity": l.opacity,
            "distill": l.distill,
        },
        "total": m.total,
        "gaussians": m.gaussians,
        "psnr": m.eval_psnr,
        "lr": lr,
        "density": m.density.map(|d| json!({
            "before": d.before, "after": d.after, "pruned": d.pruned,
            "cloned": d.cloned, "split": d.split, "relocated": d.relocated,
        })),
    })
}

#[derive(Clone, Debug)]
pub struct TrainJob {
    /// Scene covering all GOPs (`gop_length` frames = `gop_count × G`).
    pub spec: SceneSpec,
    pub gop_count: usize,
    pub config: TrainConfig,
    pub points: usize,
    pub fps: f64,
    pub out_dir: PathBuf,
    pub cache: Option<SceneCache>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GopSummary {
    pub gop: usize,
    pub gaussians: usize,
    pub eval_psnr: f64,
    pub train_psnr: f64,
    pub seconds: f64,
}

pub fn load_scene(spec: &SceneSpec, cache: Option<&SceneCache>) -> Result<SyntheticScene> {
    match cache {
        Some(c) => Ok(c.load_or_generate(spec)?.0),
        None => Ok(stgs_core::synth::generate(spec)?),
    }
}

pub fn scene_meta(scene: &SyntheticScene, gop_count: usize, cfg: &TrainConfig, fps: f64) -> SceneMeta {
    let spec = &scene.spec;
    SceneMeta {
        scene_id: format!("{}-{}", spec.motion.name(), &spec_hash(spec)[..8]),
        spec: SceneSpecJson::from(spec),
        gop_count,
        gop_length: cfg.gop_length,
        window: cfg.window,
        fps,
        width: spec.width,
        height: spec.height,
        cameras: scene.cameras.iter().map(CameraJson::from).collect(),
        eval_cameras: vec![scene.held_out_camera()],
        orbit: Orbit {
            center: [0.0; 3],
            radius: spec.camera_radius,
        },
        qps: Vec::new(),
    }
}

/// Train every GOP, writing `scene.json`, `metrics.jsonl` and checkpoints to `out_dir`.
pub fn run(job: &TrainJob, on_iteration: &mut dyn FnMut(usize, &IterationMetrics)) -> Result<Vec<GopSummary>> {
    let g = job.config.gop_length;
    if job.spec.gop_length != g * job.gop_count {
        return Err(Error::Usage(format!(
            "scene has {} frames, expected {} GOPs of {g}",
            job.spec.gop_length, job.gop_count
        )));
    }
    job.config.validate()?;
    std::fs::create_dir_all(&job.out_dir).at(&job.out_dir)?;
    let scene = load_scene(&job.spec, job.cache.as_ref())?;
    scene_meta(&scene, job.gop_count, &job.config, job.fps).write(&job.out_dir)?;
    let mut log = MetricsLog::append(&job.out_dir.join("metrics.jsonl"))?;
    let mut out = Vec::with_capacity(job.gop_count);
    for gop in 0..job.gop_count {
        let data = TrainData::from_scene_gop(&scene, gop, g, job.points, job.config.seed.wrapping_add(gop as u64));
        let mut cfg = job.config.clone();
        cfg.seed = cfg.seed.wrapping_add(gop as u64);
        let t0 = Instant::now();
        let mut log_err = None;
        let trained: TrainOutput = train_gop_with(&data, &cfg, &mut |m| {
            if let Err(e) = log.write(&metrics_record(gop, m)) {
                log_err.get_or_insert(e);
            }
            on_iteration(gop, m);
        })?;
        if let Some(e) = log_err {
            return Err(e);
        }
        log.write(&json!({"gop": gop, "final": true, "eval_psnr": trained.eval_psnr, "train_psnr": trained.train_psnr,
            "gaussians": trained.model().gaussians.count()}))?;
        log.flush()?;
        write_checkpoint(&job.out_dir, gop, trained.model(), &trained.layout)?;
        out.push(GopSummary {
            gop,
            gaussians: trained.model().gaussians.count(),
            eval_psnr: trained.eval_psnr,
            train_psnr: trained.train_psnr,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}
