//! Encoded scene directories and the stream manifest.
//!
//! ```text
//! scene_dir/scene.json
//! scene_dir/gop_0000/qp16.stgs
//! scene_dir/gop_0000/qp20.stgs
//! ...
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::scene::{CameraJson, Orbit, SceneMeta};

pub const SEGMENT_TEMPLATE: &str = "/segment/{gop}/{qp}";

pub fn gop_dir(dir: &Path, gop: usize) -> PathBuf {
    dir.join(format!("gop_{gop:04}"))
}

pub fn segment_file(dir: &Path, gop: usize, qp: u32) -> PathBuf {
    gop_dir(dir, gop).join(format!("qp{qp:02}.stgs"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpLevel {
    pub qp: u32,
    /// Exact segment size of every GOP.
    pub gop_bytes: Vec<u64>,
    /// Mean over GOPs of `bytes / G / 1000`.
    pub mean_frame_kb: f64,
}

impl QpLevel {
    pub fn mean_frame_bytes(&self) -> f64 {
        self.mean_frame_kb * 1000.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub scene_id: String,
    /// Content hash of all segments; also sent as `x-scene-version`.
    pub version: String,
    pub gop_count: usize,
    pub gop_length: usize,
    pub window: usize,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    /// Sorted by ascending QP.
    pub qp_ladder: Vec<QpLevel>,
    pub cameras: Vec<CameraJson>,
    pub orbit: Orbit,
    pub segment_template: String,
}

impl StreamManifest {
    pub fn level(&self, qp: u32) -> Option<&QpLevel> {
        self.qp_ladder.iter().find(|l| l.qp == qp)
    }

    pub fn segment_uri(&self, gop: usize, qp: u32) -> String {
        self.segment_template
            .replace("{gop}", &gop.to_string())
            .replace("{qp}", &qp.to_string())
    }
}

/// QP levels present for GOP 0, ascending.
fn discover_qps(dir: &Path) -> Result<Vec<u32>> {
    let g0 = gop_dir(dir, 0);
    let mut qps = Vec::new();
    for entry in std::fs::read_dir(&g0).at(&g0)? {
        let name = entry.at(&g0)?.file_name();
        let name = name.to_string_lossy();
        if let Some(q) = name.strip_prefix("qp").and_then(|s| s.strip_suffix(".stgs")) {
            if let Ok(q) = q.parse() {
                qps.push(q);
            }
        }
    }
    qps.sort_unstable();
    Ok(qps)
}

pub fn build_manifest(dir: &Path) -> Result<StreamManifest> {
    let meta = SceneMeta::read(dir)?;
    let mut qps = if meta.qps.is_empty() { discover_qps(dir)? } else { meta.qps.clone() };
    qps.sort_unstable();
    qps.dedup();
    if qps.is_empty() {
        return Err(Error::Manifest("no QP levels found".into()));
    }
    if meta.gop_count == 0 || meta.gop_length == 0 {
        return Err(Error::Manifest("scene has no GOPs".into()));
    }
    let mut hasher = Sha256::new();
    let mut ladder = Vec::with_capacity(qps.len());
    for &qp in &qps {
        let mut sizes = Vec::with_capacity(meta.gop_count);
        for gop in 0..meta.gop_count {
            let p = segment_file(dir, gop, qp);
            let bytes = std::fs::read(&p).map_err(|_| Error::Manifest(format!("missing segment for gop {gop}, qp {qp}")))?;
            hasher.update((gop as u64).to_le_bytes());
            hasher.update(qp.to_le_bytes());
            hasher.update(&bytes);
            sizes.push(bytes.len() as u64);
        }
        let mean = sizes.iter().sum::<u64>() as f64 / sizes.len() as f64 / meta.gop_length as f64 / 1000.0;
        ladder.push(QpLevel {
            qp,
            gop_bytes: sizes,
            mean_frame_kb: mean,
        });
    }
    for w in ladder.windows(2) {
        for gop in 0..meta.gop_count {
            if w[1].gop_bytes[gop] > w[0].gop_bytes[gop] {
                return Err(Error::Manifest(format!(
                    "gop {gop}: qp {} segment ({} B) is larger than qp {} ({} B)",
                    w[1].qp, w[1].gop_bytes[gop], w[0].qp, w[0].gop_bytes[gop]
                )));
            }
        }
    }
    Ok(StreamManifest {
        scene_id: meta.scene_id,
        version: hex::encode(&hasher.finalize()[..8]),
        gop_count: meta.gop_count,
        gop_length: meta.gop_length,
        window: meta.window,
        fps: meta.fps,
        width: meta.width,
        height: meta.height,
        qp_ladder: ladder,
        cameras: meta.cameras,
        orbit: meta.orbit,
        segment_template: SEGMENT_TEMPLATE.into(),
    })
}
