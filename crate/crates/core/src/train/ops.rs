//! Tape operations wrapping the renderer and the image/grid losses.

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{shape_err, Result};
use crate::gaussian::{CameraModel, GaussianSet};
use crate::grid::GridLayout;
use crate::losses;
use crate::math::Mat;
use crate::render::{self, DynamicMask, Projection, RasterSettings, Rasterized};

/// Per-Gaussian screen-space gradient magnitudes written by the render backward
/// pass (in normalized device units, as used by densification).
pub type ScreenGradSink = Rc<RefCell<Vec<f64>>>;

struct RenderOp {
    cam: CameraModel,
    projection: Projection,
    forward: Rasterized,
    sink: Option<ScreenGradSink>,
}

fn to_set(inputs: &[&Mat]) -> GaussianSet {
    GaussianSet {
        positions: inputs[0].clone(),
        scales: inputs[1].clone(),
        rotations: inputs[2].clone(),
        opacities: inputs[3].clone(),
        colors: inputs[4].clone(),
    }
}

/// Render pre-activation attributes `[positions, scales, rotations, opacities, colors]`
/// into an `(H·W) × 3` image variable.
pub fn render(tape: &mut Tape, attrs: [Var; 5], cam: &CameraModel, sink: Option<ScreenGradSink>) -> Result<Var> {
    let vals: Vec<&Mat> = attrs.iter().map(|&v| tape.value(v)).collect();
    let set = to_set(&vals);
    let projection = render::project(&set, cam)?;
    let forward = render::rasterize_with(&projection.splats, cam.width, cam.height, &RasterSettings::default());
    let out = Mat {
        rows: cam.width * cam.height,
        cols: 3,
        data: forward.image.rgb.clone(),
    };
    let op = RenderOp {
        cam: cam.clone(),
        projection,
        forward,
        sink,
    };
    Ok(tape.custom(&attrs, out, Box::new(op)))
}

impl CustomOp for RenderOp {
    fn backward(&self, g: &Mat, inputs: &[&Mat], _output: &Mat) -> Result<Vec<Option<Mat>>> {
        let set = to_set(inputs);
        let splats = &self.projection.splats;
        let sg = render::rasterize_backward(splats, &self.forward, &g.data)?;
        let n = set.count();
        let mut d = [
            Mat::zeros(n, 3),
            Mat::zeros(n, 3),
            Mat::zeros(n, 4),
            Mat::zeros(n, 1),
            Mat::zeros(n, 3),
        ];
        let (hw, hh) = (self.cam.width as f64 / 2.0, self.cam.height as f64 / 2.0);
        let mut sink = self.sink.as_ref().map(|s| s.borrow_mut());
        for (k, s) in splats.iter().enumerate() {
            let i = s.source;
            let ls = set.scales.row(i);
            let fg = render::project_footprint_backward(
                &self.cam,
                &set.position(i),
                &[ls[0], ls[1], ls[2]],
                &set.quaternion(i),
                &sg.mean2d[k],
                &sg.cov2d[k],
            )?;
            d[0].row_mut(i).copy_from_slice(&fg.position);
            d[1].row_mut(i).copy_from_slice(&fg.log_scale);
            d[2].row_mut(i).copy_from_slice(&fg.quaternion);
            d[3].set(i, 0, sg.alpha[k] * s.alpha * (1.0 - s.alpha));
            let c = set.colors.row(i);
            for ch in 0..3 {
                if c[ch] > 0.0 {
                    d[4].set(i, ch, sg.color[k][ch]);
                }
            }
            if let Some(sink) = sink.as_mut() {
                let [gx, gy] = sg.mean2d[k];
                let (nx, ny) = (gx * hw, gy * hh);
                sink[i] = crate::math::sqrt(nx * nx + ny * ny);
            }
        }
        Ok(d.into_iter().map(Some).collect())
    }
}

/// Backward rule for a scalar loss whose gradient was computed in the forward pass.
struct PrecomputedGrad {
    grad: Mat,
}

impl CustomOp for PrecomputedGrad {
    fn backward(&self, g: &Mat, _inputs: &[&Mat], _output: &Mat) -> Result<Vec<Option<Mat>>> {
        let s = g.data[0];
        Ok(vec![Some(self.grad.map(|v| v * s))])
    }
}

fn scalar(v: f64) -> Mat {
    Mat::from_fn(1, 1, |_, _| v)
}

/// Masked reconstruction loss of an `(H·W) × 3` image variable.
pub fn reconstruction(tape: &mut Tape, img: Var, gt: &[f64], mask: &DynamicMask, beta: f64) -> Result<Var> {
    let v = tape.value(img);
    let (loss, grad) = losses::reconstruction_loss_with_grad(&v.data, gt, mask, beta)?;
    let grad = Mat {
        rows: v.rows,
        cols: v.cols,
        data: grad,
    };
    Ok(tape.custom(&[img], scalar(loss), Box::new(PrecomputedGrad { grad })))
}

/// `1 − SSIM(img, gt)` of an `(H·W) × 3` image variable.
pub fn dssim(tape: &mut Tape, img: Var, gt: &[f64], width: usize, height: usize) -> Result<Var> {
    let v = tape.value(img);
    let (s, grad) = losses::ssim_with_grad(&v.data, gt, width, height, 3)?;
    let grad = Mat {
        rows: v.rows,
        cols: v.cols,
        data: grad.into_iter().map(|x| -x).collect(),
    };
    Ok(tape.custom(&[img], scalar(1.0 - s), Box::new(PrecomputedGrad { grad })))
}

struct SpatialOp {
    cell_source: Vec<usize>,
    inv_range: Vec<f64>,
    grid_grad: Mat,
}

/// A grid layout together with per-column normalization constants for each of
/// the five canonical attributes, fixed when the layout is computed.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGrid {
    pub layout: GridLayout,
    pub inv_range: [Vec<f64>; 5],
}

fn inverse_ranges(m: &Mat) -> Vec<f64> {
    (0..m.cols)
        .map(|c| {
            let (lo, hi) = (0..m.rows).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(m.get(r, c)), hi.max(m.get(r, c)))
            });
            if hi - lo > 1e-12 {
                1.0 / (hi - lo)
            } else {
                0.0
            }
        })
        .collect()
}

impl SpatialGrid {
    pub fn new(layout: GridLayout, g: &GaussianSet) -> Self {
        Self {
            layout,
            inv_range: [
                inverse_ranges(&g.positions),
                inverse_ranges(&g.scales),
                inverse_ranges(&g.rotations),
                inverse_ranges(&g.opacities),
                inverse_ranges(&g.colors),
            ],
        }
    }
}

/// Gaussian-filter smoothness of one `N × C` attribute arranged on `layout`,
/// with column `c` scaled by `inv_range[c]`.
pub fn spatial_smoothness(tape: &mut Tape, attr: Var, layout: &GridLayout, inv_range: &[f64], sigma: f64) -> Result<Var> {
    let v = tape.value(attr);
    if v.rows != layout.count() || inv_range.len() != v.cols {
        return Err(shape_err!(
            "{}x{} attribute for a {}-Gaussian layout with {} scales",
            v.rows,
            v.cols,
            layout.count(),
            inv_range.len()
        ));
    }
    let n = layout.count();
    let inv = layout.inverse();
    let cell_source: Vec<usize> = (0..layout.cells())
        .map(|c| if c < n { inv[c] as usize } else { inv[n - 1] as usize })
        .collect();
    let grid = Mat::from_fn(layout.cells(), v.cols, |cell, c| v.get(cell_source[cell], c) * inv_range[c]);
    let (loss, grid_grad) = losses::spatial_smoothness_with_grad(&grid, layout.side, n, sigma)?;
    let op = SpatialOp {
        cell_source,
        inv_range: inv_range.to_vec(),
        grid_grad,
    };
    Ok(tape.custom(&[attr], scalar(loss), Box::new(op)))
}

impl CustomOp for SpatialOp {
    fn backward(&self, g: &Mat, inputs: &[&Mat], _output: &Mat) -> Result<Vec<Option<Mat>>> {
        let s = g.data[0];
        let x = inputs[0];
        let mut d = Mat::zeros(x.rows, x.cols);
        for (cell, &src) in self.cell_source.iter().enumerate() {
            for c in 0..x.cols {
                d.data[src * x.cols + c] += s * self.grid_grad.get(cell, c) * self.inv_range[c];
            }
        }
        Ok(vec![Some(d)])
    }
}
