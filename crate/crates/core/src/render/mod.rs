//! Software splatting: projection, tile-binned compositing, analytic backward,
//! and dynamic-region masks.

mod mask;
mod project;
mod raster;

pub use mask::*;
pub use project::*;
pub use raster::*;

use crate::error::Result;
use crate::gaussian::{CameraModel, GaussianSet};

/// Project and rasterize in one call.
pub fn render(gaussians: &GaussianSet, cam: &CameraModel) -> Result<(RenderedImage, RenderStats)> {
    let projection = project(gaussians, cam)?;
    let mut out = rasterize_with(&projection.splats, cam.width, cam.height, &RasterSettings::default());
    out.stats.culled = projection.culled;
    Ok((out.image, out.stats))
}

/// Gradients of `Σ ⟨grad_image, render(gaussians)⟩` with respect to every
/// pre-activation attribute, laid out like the input set.
pub fn render_backward(gaussians: &GaussianSet, cam: &CameraModel, grad_image: &[f64]) -> Result<GaussianSet> {
    let projection = project(gaussians, cam)?;
    let forward = rasterize_with(&projection.splats, cam.width, cam.height, &RasterSettings::default());
    let sg = rasterize_backward(&projection.splats, &forward, grad_image)?;
    let n = gaussians.count();
    let mut out = GaussianSet::zeros(n);
    out.rotations.data.iter_mut().for_each(|v| *v = 0.0);
    for (k, s) in projection.splats.iter().enumerate() {
        let i = s.source;
        let ls = gaussians.scales.row(i);
        let fg = project_footprint_backward(
            cam,
            &gaussians.position(i),
            &[ls[0], ls[1], ls[2]],
            &gaussians.quaternion(i),
            &sg.mean2d[k],
            &sg.cov2d[k],
        )?;
        out.positions.row_mut(i).copy_from_slice(&fg.position);
        out.scales.row_mut(i).copy_from_slice(&fg.log_scale);
        out.rotations.row_mut(i).copy_from_slice(&fg.quaternion);
        out.opacities.set(i, 0, sg.alpha[k] * s.alpha * (1.0 - s.alpha));
        let c = gaussians.colors.row(i);
        for ch in 0..3 {
            let g = if c[ch] > 0.0 { sg.color[k][ch] } else { 0.0 };
            out.colors.set(i, ch, g);
        }
    }
    Ok(out)
}
