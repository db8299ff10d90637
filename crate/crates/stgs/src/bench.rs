//! Rate, distortion and timing table per (GOP, QP).

use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use stgs_core::losses::ssim;
use stgs_core::pipeline;
use stgs_core::segment::{decode_gop, encode_gop_with, EncodeOptions, Segment};

use crate::checkpoint::read_checkpoint;
use crate::error::Result;
use crate::scene::{SceneCache, SceneMeta};
use crate::train::load_scene;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub gop: usize,
    pub qp: u32,
    pub gaussians: usize,
    pub bytes: usize,
    pub attribute_bytes: usize,
    pub video_bytes: usize,
    pub weight_bytes: usize,
    pub kb_per_frame: f64,
    pub encode_ms: f64,
    pub decode_ms: f64,
    pub render_ms_per_frame: f64,
    pub mean_splats_per_pixel: f64,
    pub culled: usize,
    /// Held-out cameras against ground truth.
    pub psnr_gt: f64,
    pub ssim_gt: f64,
    /// Held-out cameras against the unquantized model's renders.
    pub psnr_vs_unquantized: f64,
}

pub const CSV_HEADER: &str = "gop,qp,gaussians,bytes,attribute_bytes,video_bytes,weight_bytes,kb_per_frame,encode_ms,decode_ms,render_ms_per_frame,mean_splats_per_pixel,culled,psnr_gt,ssim_gt,psnr_vs_unquantized";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3},{:.2},{:.2},{:.3},{:.3},{},{:.3},{:.5},{:.3}",
            self.gop,
            self.qp,
            self.gaussians,
            self.bytes,
            self.attribute_bytes,
            self.video_bytes,
            self.weight_bytes,
            self.kb_per_frame,
            self.encode_ms,
            self.decode_ms,
            self.render_ms_per_frame,
            self.mean_splats_per_pixel,
            self.culled,
            self.psnr_gt,
            self.ssim_gt,
            self.psnr_vs_unquantized
        )
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Encode, decode and evaluate every GOP of a trained model directory at each QP.
pub fn bench(model_dir: &Path, qps: &[u32], cache: Option<&SceneCache>) -> Result<Vec<BenchRow>> {
    let meta = SceneMeta::read(model_dir)?;
    let spec = (&meta.spec).into();
    let scene = load_scene(&spec, cache)?;
    let cams = meta.camera_models()?;
    let g = meta.gop_length;
    let mut rows = Vec::new();
    for gop in 0..meta.gop_count {
        let (model, layout) = read_checkpoint(model_dir, gop)?;
        let mut reference = Vec::new();
        for f in 0..g {
            for &c in &meta.eval_cameras {
                reference.push(pipeline::render_frame(&model, f, &cams[c])?);
            }
        }
        for &qp in qps {
            let opts = EncodeOptions {
                layout: Some(&layout),
                ..Default::default()
            };
            let t0 = Instant::now();
            let bytes = encode_gop_with(&model, qp, &opts)?;
            let encode_ms = t0.elapsed().as_secs_f64() * 1000.0;
            let sizes = Segment::parse(&bytes)?.sizes();
            let t0 = Instant::now();
            let decoded = decode_gop(&bytes)?.model;
            let decode_ms = t0.elapsed().as_secs_f64() * 1000.0;
            let (mut psnr_gt, mut ssim_gt, mut psnr_ref, mut render_ms, mut spp, mut culled) = (0.0, 0.0, 0.0, 0.0, 0.0, 0);
            let mut k = 0;
            for f in 0..g {
                for &c in &meta.eval_cameras {
                    let t0 = Instant::now();
                    let (img, stats) = pipeline::render_frame_with_stats(&decoded, f, &cams[c])?;
                    render_ms += t0.elapsed().as_secs_f64() * 1000.0;
                    let gt = &scene.images[gop * g + f][c];
                    psnr_gt += img.psnr(gt)?;
                    ssim_gt += ssim(&img.rgb, &gt.rgb, img.width, img.height, 3)?;
                    psnr_ref += img.psnr(&reference[k])?;
                    spp += stats.mean_splats_per_pixel;
                    culled += stats.culled;
                    k += 1;
                }
            }
            let n = k.max(1) as f64;
            rows.push(BenchRow {
                gop,
                qp,
                gaussians: model.gaussians.count(),
                bytes: bytes.len(),
                attribute_bytes: sizes.attributes.iter().sum::<usize>() + sizes.permutation,
                video_bytes: sizes.video,
                weight_bytes: sizes.weights,
                kb_per_frame: bytes.len() as f64 / g as f64 / 1000.0,
                encode_ms,
                decode_ms,
                render_ms_per_frame: render_ms / n,
                mean_splats_per_pixel: spp / n,
                culled: culled / k.max(1),
                psnr_gt: psnr_gt / n,
                ssim_gt: ssim_gt / n,
                psnr_vs_unquantized: psnr_ref / n,
            });
        }
    }
    Ok(rows)
}
