//! Encoding a trained model directory into a streamable scene directory.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use stgs_core::segment::{encode_gop_with, EncodeOptions, ExternalCodec, Segment};

use crate::checkpoint::read_checkpoint;
use crate::error::{IoContext, Result};
use crate::manifest::{build_manifest, gop_dir, segment_file, StreamManifest};
use crate::scene::SceneMeta;

pub const DEFAULT_QPS: [u32; 5] = [16, 20, 24, 28, 32];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EncodedSegment {
    pub gop: usize,
    pub qp: u32,
    pub bytes: usize,
    pub video_bytes: usize,
    pub encode_ms: f64,
}

/// Encode every checkpoint of `model_dir` at every QP into `out_dir`, then
/// build (and thereby validate) the manifest.
pub fn encode_scene(
    model_dir: &Path,
    out_dir: &Path,
    qps: &[u32],
    external: Option<&dyn ExternalCodec>,
) -> Result<(StreamManifest, Vec<EncodedSegment>)> {
    let mut meta = SceneMeta::read(model_dir)?;
    let mut rows = Vec::new();
    for gop in 0..meta.gop_count {
        let (model, layout) = read_checkpoint(model_dir, gop)?;
        let dir = gop_dir(out_dir, gop);
        std::fs::create_dir_all(&dir).at(&dir)?;
        for &qp in qps {
            let opts = EncodeOptions {
                layout: Some(&layout),
                external,
                ..Default::default()
            };
            let t0 = Instant::now();
            let bytes = encode_gop_with(&model, qp, &opts)?;
            let encode_ms = t0.elapsed().as_secs_f64() * 1000.0;
            let video_bytes = Segment::parse(&bytes)?.sizes().video;
            let p = segment_file(out_dir, gop, qp);
            std::fs::write(&p, &bytes).at(&p)?;
            rows.push(EncodedSegment {
                gop,
                qp,
                bytes: bytes.len(),
                video_bytes,
                encode_ms,
            });
        }
    }
    let mut sorted = qps.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    meta.qps = sorted;
    meta.write(out_dir)?;
    Ok((build_manifest(out_dir)?, rows))
}
