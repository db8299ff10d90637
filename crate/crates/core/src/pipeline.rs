//! Inference path: canonical Gaussians, temporal features and decoders to pixels.

use alloc::vec::Vec;

use crate::error::Result;
use crate::gaussian::{CameraModel, StreamModel};
use crate::render::{self, RenderStats, RenderedImage};

/// Render frame `frame` of a GOP model from `cam`.
pub fn render_frame(model: &StreamModel, frame: usize, cam: &CameraModel) -> Result<RenderedImage> {
    render_frame_with_stats(model, frame, cam).map(|(img, _)| img)
}

pub fn render_frame_with_stats(model: &StreamModel, frame: usize, cam: &CameraModel) -> Result<(RenderedImage, RenderStats)> {
    let gaussians = model.frame_gaussians(frame, &cam.view_dir)?;
    render::render(&gaussians, cam)
}

/// Mean PSNR over `frames × cameras` against `images[frame][camera]`.
pub fn mean_psnr(model: &StreamModel, cameras: &[CameraModel], images: &[Vec<RenderedImage>], camera_ids: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (frame, row) in images.iter().enumerate() {
        for &c in camera_ids {
            let img = render_frame(model, frame, &cameras[c])?;
            total += img.psnr(&row[c])?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}
