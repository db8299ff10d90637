//! Training objectives. Functions returning a gradient differentiate with
//! respect to their first argument.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::math::{self, Mat};
use crate::render::DynamicMask;

pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Loss weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub aux: f64,
    pub temporal: f64,
    pub opacity: f64,
    pub distill: f64,
    pub huber_delta: f64,
    pub spatial_sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.2,
            aux: 0.2,
            temporal: 1.0,
            opacity: 0.01,
            distill: 0.005,
            huber_delta: 0.05,
            spatial_sigma: 1.0,
        }
    }
}

/// Scalar loss terms of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub reconstruction: f64,
    pub aux_ssim: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub opacity: f64,
    pub distill: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.reconstruction
        + w.aux * c.aux_ssim
        + c.spatial
        + w.temporal * c.temporal
        + w.opacity * c.opacity
        + w.distill * c.distill
}

fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            math::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// 1D pass of a border-renormalized window filter along x (`axis = 0`) or y.
/// With `transpose` the adjoint map is applied.
fn window_pass(src: &[f64], w: usize, h: usize, ch: usize, k: &[f64], axis: usize, transpose: bool) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let len = if axis == 0 { w } else { h };
    let norms: Vec<f64> = (0..len as isize)
        .map(|p| {
            (-r..=r)
                .filter(|t| (0..len as isize).contains(&(p + t)))
                .map(|t| k[(t + r) as usize])
                .sum()
        })
        .collect();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let p = if axis == 0 { x } else { y } as isize;
            for t in -r..=r {
                let q = p + t;
                if q < 0 || q >= len as isize {
                    continue;
                }
                let (qx, qy) = if axis == 0 { (q as usize, y) } else { (x, q as usize) };
                let wk = k[(t + r) as usize] / norms[p as usize];
                let (pi, qi) = ((y * w + x) * ch, (qy * w + qx) * ch);
                for c in 0..ch {
                    if transpose {
                        out[qi + c] += wk * src[pi + c];
                    } else {
                        out[pi + c] += wk * src[qi + c];
                    }
                }
            }
        }
    }
    out
}

fn window_filter(src: &[f64], w: usize, h: usize, ch: usize, k: &[f64]) -> Vec<f64> {
    let a = window_pass(src, w, h, ch, k, 0, false);
    window_pass(&a, w, h, ch, k, 1, false)
}

fn window_filter_t(src: &[f64], w: usize, h: usize, ch: usize, k: &[f64]) -> Vec<f64> {
    let a = window_pass(src, w, h, ch, k, 1, true);
    window_pass(&a, w, h, ch, k, 0, true)
}

/// Mean SSIM over pixels and channels of two interleaved `w × h × ch` images,
/// with the gradient with respect to `a`.
///
/// The 11×11 Gaussian window (σ = 1.5) is renormalized over the in-image part
/// near borders.
pub fn ssim_with_grad(a: &[f64], b: &[f64], w: usize, h: usize, ch: usize) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() || a.len() != w * h * ch {
        return Err(shape_err!("ssim on {} vs {} values for {w}x{h}x{ch}", a.len(), b.len()));
    }
    let k = gaussian_kernel(SSIM_RADIUS, SSIM_SIGMA);
    let n = a.len();
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = window_filter(a, w, h, ch, &k);
    let mu_b = window_filter(b, w, h, ch, &k);
    let e_aa = window_filter(&sq(a, a), w, h, ch, &k);
    let e_bb = window_filter(&sq(b, b), w, h, ch, &k);
    let e_ab = window_filter(&sq(a, b), w, h, ch, &k);
    let mut total = 0.0;
    let mut d_mu = vec![0.0; n];
    let mut d_aa = vec![0.0; n];
    let mut d_ab = vec![0.0; n];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let n1 = 2.0 * ma * mb + SSIM_C1;
        let n2 = 2.0 * cov + SSIM_C2;
        let d1 = ma * ma + mb * mb + SSIM_C1;
        let d2 = va + vb + SSIM_C2;
        let s = n1 * n2 / (d1 * d2);
        total += s;
        // s as a function of (ma, e_aa, e_ab)
        let ds_dn1 = n2 / (d1 * d2);
        let ds_dn2 = n1 / (d1 * d2);
        let ds_dd1 = -s / d1;
        let ds_dd2 = -s / d2;
        d_mu[i] = inv_n * (ds_dn1 * 2.0 * mb + ds_dn2 * (-2.0 * mb) + ds_dd1 * 2.0 * ma + ds_dd2 * (-2.0 * ma));
        d_aa[i] = inv_n * ds_dd2;
        d_ab[i] = inv_n * ds_dn2 * 2.0;
    }
    let g_mu = window_filter_t(&d_mu, w, h, ch, &k);
    let g_aa = window_filter_t(&d_aa, w, h, ch, &k);
    let g_ab = window_filter_t(&d_ab, w, h, ch, &k);
    let grad = (0..n)
        .map(|i| g_mu[i] + 2.0 * a[i] * g_aa[i] + b[i] * g_ab[i])
        .collect();
    Ok((total * inv_n, grad))
}

pub fn ssim(a: &[f64], b: &[f64], w: usize, h: usize, ch: usize) -> Result<f64> {
    ssim_with_grad(a, b, w, h, ch).map(|(s, _)| s)
}

/// Mean absolute error and its gradient with respect to `a` (sign, 0 at ties).
pub fn l1_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(shape_err!("l1 on {} vs {} values", a.len(), b.len()));
    }
    let n = a.len().max(1) as f64;
    let mut total = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            total += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((total / n, grad))
}

fn apply_mask(img: &[f64], mask: &DynamicMask) -> Vec<f64> {
    img.chunks_exact(3)
        .zip(&mask.mask)
        .flat_map(|(p, &m)| if m { [p[0], p[1], p[2]] } else { [0.0; 3] })
        .collect()
}

/// `(1 − β)·L1 + β·(1 − SSIM(I⊙mask, gt⊙mask))` on RGB images, with gradient.
pub fn reconstruction_loss_with_grad(
    img: &[f64],
    gt: &[f64],
    mask: &DynamicMask,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    let (w, h) = (mask.width, mask.height);
    if img.len() != w * h * 3 || gt.len() != img.len() {
        return Err(shape_err!("reconstruction loss on {} / {} values for a {w}x{h} mask", img.len(), gt.len()));
    }
    let (l1, g1) = l1_with_grad(img, gt)?;
    let (s, gs) = ssim_with_grad(&apply_mask(img, mask), &apply_mask(gt, mask), w, h, 3)?;
    let grad = g1
        .iter()
        .zip(&gs)
        .enumerate()
        .map(|(i, (a, b))| {
            let m = if mask.mask[i / 3] { 1.0 } else { 0.0 };
            (1.0 - beta) * a - beta * m * b
        })
        .collect();
    Ok(((1.0 - beta) * l1 + beta * (1.0 - s), grad))
}

pub fn reconstruction_loss(img: &[f64], gt: &[f64], mask: &DynamicMask, beta: f64) -> Result<f64> {
    reconstruction_loss_with_grad(img, gt, mask, beta).map(|(l, _)| l)
}

#[inline]
pub fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

#[inline]
pub fn huber_grad(x: f64, delta: f64) -> f64 {
    x.clamp(-delta, delta)
}

fn mean_huber(a: &Mat, b: &Mat, delta: f64) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(shape_err!("huber on {}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols));
    }
    let n = a.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| huber(x - y, delta)).sum::<f64>() / n)
}

/// Average of the mean Huber penalties of `prev − cur` and `cur − next`.
pub fn temporal_consistency(prev: &Mat, cur: &Mat, next: &Mat, delta: f64) -> Result<f64> {
    Ok(0.5 * (mean_huber(prev, cur, delta)? + mean_huber(cur, next, delta)?))
}

pub const SPATIAL_RADIUS: usize = 3;

fn reflect(i: isize, n: usize) -> usize {
    // Symmetric reflection about the edge: (d c b a | a b c d | d c b a).
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// 2D Gaussian filter with reflected borders over a `side × side × ch` grid (or its adjoint).
fn grid_filter(src: &Mat, side: usize, k: &[f64], transpose: bool) -> Mat {
    let r = (k.len() / 2) as isize;
    let ch = src.cols;
    let mut cur = src.clone();
    let passes: [usize; 2] = if transpose { [1, 0] } else { [0, 1] };
    for axis in passes {
        let mut out = Mat::zeros(src.rows, ch);
        for y in 0..side {
            for x in 0..side {
                let p = if axis == 0 { x } else { y } as isize;
                for t in -r..=r {
                    let q = reflect(p + t, side);
                    let (qx, qy) = if axis == 0 { (q, y) } else { (x, q) };
                    let wk = k[(t + r) as usize];
                    let (pi, qi) = (y * side + x, qy * side + qx);
                    for c in 0..ch {
                        if transpose {
                            out.data[qi * ch + c] += wk * cur.data[pi * ch + c];
                        } else {
                            out.data[pi * ch + c] += wk * cur.data[qi * ch + c];
                        }
                    }
                }
            }
        }
        cur = out;
    }
    cur
}

/// Mean squared difference between a grid and its Gaussian-filtered version over the first
/// `valid` cells, with the gradient with respect to the grid.
pub fn spatial_smoothness_with_grad(grid: &Mat, side: usize, valid: usize, sigma: f64) -> Result<(f64, Mat)> {
    if grid.rows != side * side || valid > grid.rows {
        return Err(shape_err!("grid has {} cells, side {side}, {valid} valid", grid.rows));
    }
    let k = gaussian_kernel(SPATIAL_RADIUS, sigma);
    let filtered = grid_filter(grid, side, &k, false);
    let ch = grid.cols;
    let n = (valid * ch).max(1) as f64;
    let mut resid = Mat::zeros(grid.rows, ch);
    let mut total = 0.0;
    for i in 0..valid * ch {
        let d = grid.data[i] - filtered.data[i];
        total += d * d;
        resid.data[i] = 2.0 * d / n;
    }
    let back = grid_filter(&resid, side, &k, true);
    let grad = Mat {
        rows: grid.rows,
        cols: ch,
        data: resid.data.iter().zip(&back.data).map(|(a, b)| a - b).collect(),
    };
    Ok((total / n, grad))
}

pub fn spatial_smoothness(grids: &[&Mat], side: usize, valid: usize, sigma: f64) -> Result<f64> {
    let mut total = 0.0;
    for g in grids {
        total += spatial_smoothness_with_grad(g, side, valid, sigma)?.0;
    }
    Ok(total)
}

/// Mean absolute post-activation opacity.
pub fn opacity_reg(opacities: &[f64]) -> f64 {
    if opacities.is_empty() {
        return 0.0;
    }
    opacities.iter().map(|v| v.abs()).sum::<f64>() / opacities.len() as f64
}

/// Mean absolute difference between two feature tensors.
pub fn self_distill(f: &Mat, f_prime: &Mat) -> Result<f64> {
    if f.rows != f_prime.rows || f.cols != f_prime.cols {
        return Err(shape_err!("distill on {}x{} vs {}x{}", f.rows, f.cols, f_prime.rows, f_prime.cols));
    }
    let n = f.len().max(1) as f64;
    Ok(f.data.iter().zip(&f_prime.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}
