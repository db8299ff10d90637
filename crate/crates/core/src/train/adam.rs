//! Adam with per-group exponentially decayed learning rates.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{self, Mat};

/// Learning rate decaying exponentially from `start` to `end` over training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub start: f64,
    pub end: f64,
}

impl Schedule {
    pub const fn constant(lr: f64) -> Self {
        Self { start: lr, end: lr }
    }

    pub const fn decay(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    /// Rate at `progress ∈ [0, 1]`.
    pub fn at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.start * math::pow(self.end / self.start, p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0 && self.start.is_finite() && self.end.is_finite()) {
            return Err(Error::Spec(alloc::format!(
                "learning-rate schedule {} -> {} must be positive",
                self.start,
                self.end
            )));
        }
        Ok(())
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// First and second moments of one parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Mat,
    pub v: Mat,
    pub step: u64,
}

impl Moments {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m: Mat::zeros(rows, cols),
            v: Mat::zeros(rows, cols),
            step: 0,
        }
    }

    /// One Adam update of `param` with gradient `grad` and rate `lr`.
    pub fn update(&mut self, param: &mut Mat, grad: &Mat, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - math::pow(BETA1, self.step as f64);
        let bc2 = 1.0 - math::pow(BETA2, self.step as f64);
        for i in 0..param.data.len() {
            let g = grad.data[i];
            let m = BETA1 * self.m.data[i] + (1.0 - BETA1) * g;
            let v = BETA2 * self.v.data[i] + (1.0 - BETA2) * g * g;
            self.m.data[i] = m;
            self.v.data[i] = v;
            param.data[i] -= lr * (m / bc1) / (math::sqrt(v / bc2) + EPSILON);
        }
    }

    /// Rebuild the moments after rows were gathered by `source` (row `r` of the new
    /// parameter came from row `source[r]`). Rows flagged in `reset` start from zero.
    pub fn remap_rows(&mut self, source: &[usize], reset: &[bool], block: usize) {
        let old_rows = self.m.rows / block.max(1);
        let cols = self.m.cols;
        let new_rows = source.len();
        let gather = |m: &Mat| {
            let mut out = Mat::zeros(new_rows * block, cols);
            for b in 0..block {
                for (r, &s) in source.iter().enumerate() {
                    if !reset[r] {
                        let src = m.row(b * old_rows + s);
                        out.row_mut(b * new_rows + r).copy_from_slice(src);
                    }
                }
            }
            out
        };
        self.m = gather(&self.m);
        self.v = gather(&self.v);
    }
}

/// Moments for every parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub moments: Vec<Moments>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            moments: shapes.iter().map(|&(r, c)| Moments::zeros(r, c)).collect(),
        }
    }
}
