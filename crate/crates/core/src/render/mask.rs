use alloc::vec;
use alloc::vec::Vec;

use super::RenderedImage;
use crate::error::{Error, Result};
use crate::math;

/// Frames beyond this count are ignored by [`compute_dynamic_mask`].
pub const MASK_FRAMES: usize = 30;
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.02;

/// Per-pixel flag marking regions with temporal intensity variation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DynamicMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
}

impl DynamicMask {
    pub fn all(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            mask: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Threshold the population standard deviation of luma over the first 30 frames.
pub fn compute_dynamic_mask(frames: &[RenderedImage], theta: f64) -> Result<DynamicMask> {
    if frames.len() < 2 {
        return Err(Error::Domain(alloc::format!(
            "dynamic mask needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    if theta.is_nan() {
        return Err(Error::Domain("mask threshold is NaN".into()));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::Shape("frames differ in resolution".into()));
    }
    let used = &frames[..frames.len().min(MASK_FRAMES)];
    let n = used.len() as f64;
    let mut sum = vec![0.0; w * h];
    let mut sum_sq = vec![0.0; w * h];
    for f in used {
        for (i, l) in f.luma().into_iter().enumerate() {
            sum[i] += l;
            sum_sq[i] += l * l;
        }
    }
    let mask = sum
        .iter()
        .zip(&sum_sq)
        .map(|(&s, &s2)| {
            let mean = s / n;
            let var = (s2 / n - mean * mean).max(0.0);
            math::sqrt(var) > theta
        })
        .collect();
    Ok(DynamicMask {
        width: w,
        height: h,
        mask,
    })
}
