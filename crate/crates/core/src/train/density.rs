//! Densification, pruning and relocation.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::math::{self, Mat};

use super::adam::Adam;
use super::graph::Trainable;
use super::noise::standard_normal;

/// Number of leading parameter matrices whose rows are indexed by Gaussian
/// (five canonical attributes plus the feature bank).
const PER_GAUSSIAN: usize = 6;
const FEATURE_PARAM: usize = 5;
const SPLIT_SHRINK: f64 = 1.6;

/// Running mean of the post-activation per-frame opacity since the last prune.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpacityStats {
    pub sum: Vec<f64>,
    pub count: u32,
}

impl OpacityStats {
    pub fn new(n: usize) -> Self {
        Self { sum: vec![0.0; n], count: 0 }
    }

    pub fn add(&mut self, opacities: &[f64]) {
        for (s, o) in self.sum.iter_mut().zip(opacities) {
            *s += o;
        }
        self.count += 1;
    }

    /// `None` until at least one frame has been collected.
    pub fn mean(&self, i: usize) -> Option<f64> {
        (self.count > 0).then(|| self.sum[i] / self.count as f64)
    }
}

/// Running mean of screen-space positional gradient norms over the iterations
/// in which each Gaussian was visible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    /// Negative entries mark Gaussians that were not rasterized.
    pub fn add(&mut self, norms: &[f64]) {
        for (i, &g) in norms.iter().enumerate() {
            if g >= 0.0 {
                self.sum[i] += g;
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityConfig {
    /// Mean screen-gradient norm (normalized device units) above which a Gaussian densifies.
    pub grad_threshold: f64,
    /// Clone/split boundary as a fraction of the scene extent.
    pub percent_dense: f64,
    pub scene_extent: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
    pub relocation: bool,
}

/// What one density step did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensityReport {
    pub before: usize,
    pub after: usize,
    pub pruned: usize,
    pub cloned: usize,
    pub split: usize,
    pub relocated: usize,
}

/// Rebuild every per-Gaussian parameter (and its optimizer state) so that new row
/// `r` is a copy of old row `source[r]`.
fn gather(t: &mut Trainable, adam: &mut Adam, source: &[usize], reset: &[bool]) {
    let n_old = t.model.gaussians.count();
    let slots = t.model.features.slots();
    for (k, (_, m)) in t.params_mut().into_iter().take(PER_GAUSSIAN).enumerate() {
        let block = if k == FEATURE_PARAM { slots } else { 1 };
        let mut out = Mat::zeros(source.len() * block, m.cols);
        for b in 0..block {
            for (r, &s) in source.iter().enumerate() {
                out.row_mut(b * source.len() + r)
                    .copy_from_slice(m.row(b * n_old + s));
            }
        }
        *m = out;
        adam.moments[k].remap_rows(source, reset, block);
    }
    t.model.features.count = source.len();
}

fn copy_row(t: &mut Trainable, from: usize, to: usize) {
    let n = t.model.gaussians.count();
    let slots = t.model.features.slots();
    for (k, (_, m)) in t.params_mut().into_iter().take(PER_GAUSSIAN).enumerate() {
        let block = if k == FEATURE_PARAM { slots } else { 1 };
        for b in 0..block {
            let src = m.row(b * n + from).to_vec();
            m.row_mut(b * n + to).copy_from_slice(&src);
        }
    }
}

fn reset_moments(adam: &mut Adam, rows: &[usize], n: usize, slots: usize) {
    for (k, mo) in adam.moments.iter_mut().take(PER_GAUSSIAN).enumerate() {
        let block = if k == FEATURE_PARAM { slots } else { 1 };
        let cols = mo.m.cols;
        for b in 0..block {
            for &r in rows {
                let i = (b * n + r) * cols;
                mo.m.data[i..i + cols].fill(0.0);
                mo.v.data[i..i + cols].fill(0.0);
            }
        }
    }
}

/// A sample from the Gaussian's own spatial distribution, offset from its mean.
fn sample_offset<R: Rng + ?Sized>(t: &Trainable, i: usize, rng: &mut R) -> [f64; 3] {
    let g = &t.model.gaussians;
    let q = g.quaternion(i);
    let norm = math::sqrt(q.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
    let r = math::quat_to_rotation(&[q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]);
    let s = g.scales.row(i);
    let local = [
        math::exp(s[0]) * standard_normal(rng),
        math::exp(s[1]) * standard_normal(rng),
        math::exp(s[2]) * standard_normal(rng),
    ];
    math::mat3_vec(&r, &local)
}

fn max_scale(t: &Trainable, i: usize) -> f64 {
    t.model.gaussians.scales.row(i).iter().map(|&s| math::exp(s)).fold(0.0, f64::max)
}

/// Prune low-opacity Gaussians, clone or split high-gradient ones while under the
/// budget, and relocate pruning candidates once the budget is saturated.
pub fn densify_and_prune<R: Rng + ?Sized>(
    t: &mut Trainable,
    adam: &mut Adam,
    grads: &GradStats,
    opacity: &OpacityStats,
    cfg: &DensityConfig,
    rng: &mut R,
) -> Result<DensityReport> {
    let n = t.model.gaussians.count();
    let mut report = DensityReport {
        before: n,
        after: n,
        ..Default::default()
    };
    let candidate: Vec<bool> = (0..n)
        .map(|i| opacity.mean(i).is_some_and(|o| o < cfg.prune_opacity))
        .collect();
    let mut by_grad: Vec<usize> = (0..n).filter(|&i| !candidate[i]).collect();
    by_grad.sort_by(|&a, &b| grads.mean(b).total_cmp(&grads.mean(a)).then(a.cmp(&b)));

    if n >= cfg.max_gaussians {
        if cfg.relocation {
            relocate(t, adam, &candidate, &by_grad, rng, &mut report);
        }
        return Ok(report);
    }

    let survivors = by_grad.len();
    let mut budget = cfg.max_gaussians.saturating_sub(survivors);
    let boundary = cfg.percent_dense * cfg.scene_extent;
    let (mut clones, mut splits) = (Vec::new(), Vec::new());
    for &i in &by_grad {
        if budget == 0 || grads.mean(i) < cfg.grad_threshold {
            break;
        }
        if max_scale(t, i) <= boundary {
            clones.push(i);
        } else {
            splits.push(i);
        }
        budget -= 1;
    }

    let mut source: Vec<usize> = (0..n).filter(|&i| !candidate[i]).collect();
    let kept = source.len();
    let mut reset = vec![false; kept];
    let mut new_row = vec![usize::MAX; n];
    for (r, &s) in source.iter().enumerate() {
        new_row[s] = r;
    }
    for &i in &splits {
        reset[new_row[i]] = true;
    }
    source.extend(clones.iter().copied());
    source.extend(splits.iter().copied());
    reset.resize(source.len(), true);

    // Offsets are drawn from the pre-split shapes.
    let offsets: Vec<[[f64; 3]; 2]> = splits
        .iter()
        .map(|&i| [sample_offset(t, i, rng), sample_offset(t, i, rng)])
        .collect();
    gather(t, adam, &source, &reset);

    let shrink = math::ln(SPLIT_SHRINK);
    let g = &mut t.model.gaussians;
    for (k, &i) in splits.iter().enumerate() {
        let rows = [new_row[i], kept + clones.len() + k];
        for (row, off) in rows.into_iter().zip(offsets[k]) {
            for c in 0..3 {
                let p = g.positions.get(row, c);
                g.positions.set(row, c, p + off[c]);
                let s = g.scales.get(row, c);
                g.scales.set(row, c, s - shrink);
            }
        }
    }

    report.pruned = n - kept;
    report.cloned = clones.len();
    report.split = splits.len();
    report.after = source.len();
    Ok(report)
}

fn relocate<R: Rng + ?Sized>(
    t: &mut Trainable,
    adam: &mut Adam,
    candidate: &[bool],
    by_grad: &[usize],
    rng: &mut R,
    report: &mut DensityReport,
) {
    let moved: Vec<usize> = (0..candidate.len()).filter(|&i| candidate[i]).collect();
    if moved.is_empty() || by_grad.is_empty() {
        return;
    }
    let n = t.model.gaussians.count();
    let slots = t.model.features.slots();
    let mut copies: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (j, &c) in moved.iter().enumerate() {
        copies[by_grad[j % by_grad.len()]].push(c);
    }
    let shrink = math::ln(SPLIT_SHRINK);
    let mut touched = Vec::new();
    for target in 0..n {
        if copies[target].is_empty() {
            continue;
        }
        let k = copies[target].len();
        let o = math::sigmoid(t.model.gaussians.opacities.get(target, 0));
        let shared = 1.0 - math::pow(1.0 - o, 1.0 / (k + 1) as f64);
        let logit = math::logit(shared.clamp(1e-6, 1.0 - 1e-6));
        for &c in &copies[target] {
            copy_row(t, target, c);
            let off = sample_offset(t, target, rng);
            for (d, o) in off.iter().enumerate() {
                let p = t.model.gaussians.positions.get(c, d);
                t.model.gaussians.positions.set(c, d, p + o);
            }
        }
        for &r in core::iter::once(&target).chain(&copies[target]) {
            let g = &mut t.model.gaussians;
            g.opacities.set(r, 0, logit);
            for d in 0..3 {
                let s = g.scales.get(r, d);
                g.scales.set(r, d, s - shrink);
            }
            touched.push(r);
        }
    }
    reset_moments(adam, &touched, n, slots);
    report.relocated = moved.len();
}
