//! Locality sort of Gaussians onto a square grid, attribute quantization and
//! the 16-channel feature tiling used by the feature video.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::gaussian::GaussianSet;
use crate::math::{self, Mat};

/// Placement of `N` Gaussians on a `side × side` grid.
///
/// `permutation[g]` is the row-major cell of Gaussian `g`; cells `0..N` are
/// occupied and the remaining `pad_count` cells are padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub side: usize,
    pub permutation: Vec<u32>,
    pub pad_count: usize,
}

impl GridLayout {
    pub fn side_for(n: usize) -> usize {
        let mut s = math::ceil(math::sqrt(n as f64)) as usize;
        while s * s < n {
            s += 1;
        }
        while s > 0 && (s - 1) * (s - 1) >= n {
            s -= 1;
        }
        s.max(1)
    }

    pub fn identity(n: usize) -> Self {
        let side = Self::side_for(n);
        Self {
            side,
            permutation: (0..n as u32).collect(),
            pad_count: side * side - n,
        }
    }

    pub fn count(&self) -> usize {
        self.permutation.len()
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    /// Checks that the permutation is a bijection onto cells `0..N`.
    pub fn validate(&self) -> Result<()> {
        let n = self.count();
        if self.side * self.side < n || self.pad_count != self.side * self.side - n {
            return Err(Error::Spec("grid side/pad inconsistent with permutation length".into()));
        }
        let mut seen = vec![false; n];
        for &c in &self.permutation {
            let c = c as usize;
            if c >= n || seen[c] {
                return Err(Error::Spec("grid permutation is not a bijection".into()));
            }
            seen[c] = true;
        }
        Ok(())
    }

    /// Cell → Gaussian index for the occupied cells.
    pub fn inverse(&self) -> Vec<u32> {
        let mut inv = vec![0u32; self.count()];
        for (g, &c) in self.permutation.iter().enumerate() {
            inv[c as usize] = g as u32;
        }
        inv
    }

    /// Scatter an `N × C` attribute matrix into a `side² × C` grid, replicating
    /// the last occupied cell into the padding.
    pub fn to_grid(&self, values: &Mat) -> Result<Mat> {
        if values.rows != self.count() {
            return Err(shape_err!("{} rows for a {}-Gaussian layout", values.rows, self.count()));
        }
        let mut out = Mat::zeros(self.cells(), values.cols);
        for (g, &c) in self.permutation.iter().enumerate() {
            out.row_mut(c as usize).copy_from_slice(values.row(g));
        }
        let n = self.count();
        if n > 0 {
            let last = out.row(n - 1).to_vec();
            for c in n..self.cells() {
                out.row_mut(c).copy_from_slice(&last);
            }
        }
        Ok(out)
    }

    /// Inverse of [`GridLayout::to_grid`]; padding is dropped.
    pub fn from_grid(&self, grid: &Mat) -> Result<Mat> {
        if grid.rows != self.cells() {
            return Err(shape_err!("{} grid cells, expected {}", grid.rows, self.cells()));
        }
        let mut out = Mat::zeros(self.count(), grid.cols);
        for (g, &c) in self.permutation.iter().enumerate() {
            out.row_mut(g).copy_from_slice(grid.row(c as usize));
        }
        Ok(out)
    }
}

/// Per-column min-max normalized attributes (position, scale, unit rotation,
/// opacity, color) used as the sorting signal.
pub fn sort_attributes(g: &GaussianSet) -> Mat {
    let n = g.count();
    let mut a = Mat::zeros(n, 14);
    for i in 0..n {
        let q = g.quaternion(i);
        let qn = math::sqrt(q.iter().map(|v| v * v).sum()).max(1e-12);
        let row = a.row_mut(i);
        row[0..3].copy_from_slice(g.positions.row(i));
        row[3..6].copy_from_slice(g.scales.row(i));
        for k in 0..4 {
            row[6 + k] = q[k] / qn;
        }
        row[10] = g.opacities.get(i, 0);
        row[11..14].copy_from_slice(g.colors.row(i));
    }
    normalize_columns(&mut a);
    a
}

fn normalize_columns(a: &mut Mat) {
    for c in 0..a.cols {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in 0..a.rows {
            lo = lo.min(a.get(r, c));
            hi = hi.max(a.get(r, c));
        }
        let range = hi - lo;
        for r in 0..a.rows {
            let v = if range > 0.0 { (a.get(r, c) - lo) / range } else { 0.0 };
            a.set(r, c, v);
        }
    }
}

fn dist(a: &Mat, i: usize, j: usize) -> f64 {
    let (x, y) = (a.row(i), a.row(j));
    math::sqrt(x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
}

/// Sum of L2 distances between attribute rows over occupied 4-neighbor cell pairs.
pub fn dissimilarity(attrs: &Mat, layout: &GridLayout) -> f64 {
    let inv = layout.inverse();
    let (n, s) = (layout.count(), layout.side);
    let mut total = 0.0;
    for c in 0..n {
        let (x, y) = (c % s, c / s);
        if x + 1 < s && c + 1 < n {
            total += dist(attrs, inv[c] as usize, inv[c + 1] as usize);
        }
        if y + 1 < s && c + s < n {
            total += dist(attrs, inv[c] as usize, inv[c + s] as usize);
        }
    }
    total
}

fn spread3(v: u32) -> u64 {
    let mut x = (v & 0x3ff) as u64;
    x = (x | (x << 16)) & 0x0300_00ff;
    x = (x | (x << 8)) & 0x0300_f00f;
    x = (x | (x << 4)) & 0x030c_30c3;
    x = (x | (x << 2)) & 0x0924_9249;
    x
}

fn spread2(v: u32) -> u64 {
    let mut x = (v & 0xffff) as u64;
    x = (x | (x << 8)) & 0x00ff_00ff;
    x = (x | (x << 4)) & 0x0f0f_0f0f;
    x = (x | (x << 2)) & 0x3333_3333;
    x = (x | (x << 1)) & 0x5555_5555;
    x
}

/// 3D Morton code of a point with coordinates in `[0, 1]`, 10 bits per axis.
pub fn morton3(p: [f64; 3]) -> u64 {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 1023.0) as u32;
    spread3(q(p[0])) | (spread3(q(p[1])) << 1) | (spread3(q(p[2])) << 2)
}

pub fn morton2(x: u32, y: u32) -> u64 {
    spread2(x) | (spread2(y) << 1)
}

/// Layout produced by Morton seeding alone: Gaussians in 3D Morton order of their
/// positions fill the occupied cells in 2D Morton order.
pub fn morton_seed(g: &GaussianSet) -> GridLayout {
    let n = g.count();
    let mut layout = GridLayout::identity(n);
    if n == 0 {
        return layout;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..n {
        let p = g.position(i);
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let norm = |p: [f64; 3]| {
        let mut out = [0.0; 3];
        for k in 0..3 {
            let r = hi[k] - lo[k];
            out[k] = if r > 0.0 { (p[k] - lo[k]) / r } else { 0.0 };
        }
        out
    };
    let mut gauss: Vec<(u64, u32)> = (0..n).map(|i| (morton3(norm(g.position(i))), i as u32)).collect();
    gauss.sort();
    let s = layout.side;
    let mut cells: Vec<(u64, u32)> = (0..n)
        .map(|c| (morton2((c % s) as u32, (c / s) as u32), c as u32))
        .collect();
    cells.sort();
    for ((_, gi), (_, cell)) in gauss.iter().zip(&cells) {
        layout.permutation[*gi as usize] = *cell;
    }
    layout
}

/// Locality sort: Morton seed followed by `sweeps` passes of strictly improving
/// pairwise swaps (right, down and one random partner per cell).
pub fn sort_to_grid(g: &GaussianSet, seed: u64, sweeps: usize) -> GridLayout {
    let attrs = sort_attributes(g);
    let layout = morton_seed(g);
    refine(&attrs, layout, seed, sweeps)
}

/// Swap refinement of an existing layout against the given attribute rows.
pub fn refine(attrs: &Mat, mut layout: GridLayout, seed: u64, sweeps: usize) -> GridLayout {
    let n = layout.count();
    if n < 2 {
        return layout;
    }
    let s = layout.side;
    let mut inv = layout.inverse();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let local = |inv: &[u32], c: usize| -> f64 {
        let (x, y) = (c % s, c / s);
        let g = inv[c] as usize;
        let mut t = 0.0;
        if x > 0 {
            t += dist(attrs, g, inv[c - 1] as usize);
        }
        if x + 1 < s && c + 1 < n {
            t += dist(attrs, g, inv[c + 1] as usize);
        }
        if y > 0 {
            t += dist(attrs, g, inv[c - s] as usize);
        }
        if c + s < n {
            t += dist(attrs, g, inv[c + s] as usize);
        }
        t
    };
    for _ in 0..sweeps {
        let mut swaps = 0usize;
        for c in 0..n {
            let partners = [
                if (c % s) + 1 < s && c + 1 < n { Some(c + 1) } else { None },
                if c + s < n { Some(c + s) } else { None },
                Some(rng.random_range(0..n)),
            ];
            for p in partners.into_iter().flatten() {
                if p == c || inv[p] == inv[c] {
                    continue;
                }
                let before = local(&inv, c) + local(&inv, p);
                inv.swap(c, p);
                let after = local(&inv, c) + local(&inv, p);
                if after < before - 1e-12 {
                    swaps += 1;
                } else {
                    inv.swap(c, p);
                }
            }
        }
        if swaps == 0 {
            break;
        }
    }
    for (c, &g) in inv.iter().enumerate() {
        layout.permutation[g as usize] = c as u32;
    }
    layout
}

/// Clip and quantization rule for one attribute.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttrQuant {
    /// Fixed clip range, or `None` to use the observed min/max.
    pub clip: Option<(f64, f64)>,
    /// Number of quantization levels, or `None` for float storage.
    pub levels: Option<u32>,
}

/// Quantization rules for the five attribute images and the temporal features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec {
    pub position: AttrQuant,
    pub scale: AttrQuant,
    pub rotation: AttrQuant,
    pub opacity: AttrQuant,
    pub color: AttrQuant,
    pub features: AttrQuant,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            position: AttrQuant { clip: None, levels: None },
            scale: AttrQuant { clip: None, levels: Some(64) },
            rotation: AttrQuant { clip: Some((-1.0, 2.0)), levels: Some(128) },
            opacity: AttrQuant { clip: Some((-4.0, 4.0)), levels: Some(64) },
            color: AttrQuant { clip: Some((0.0, 4.0)), levels: None },
            features: AttrQuant { clip: None, levels: None },
        }
    }
}

/// A quantized attribute plane together with its dequantization parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Quantized {
    /// Integer codes in `0..levels`.
    Codes { lo: f64, hi: f64, levels: u32, codes: Vec<u16> },
    /// Clipped values kept as 32-bit floats.
    Float { lo: f64, hi: f64, values: Vec<f32> },
}

impl Quantized {
    pub fn range(&self) -> (f64, f64) {
        match self {
            Quantized::Codes { lo, hi, .. } | Quantized::Float { lo, hi, .. } => (*lo, *hi),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Quantized::Codes { codes, .. } => codes.len(),
            Quantized::Float { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Observed `[min, max]`, widened to a unit interval when degenerate.
pub fn observed_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

/// Clip to `[lo, hi]`, normalize to `[0, 1]` and round to `levels` steps.
pub fn quantize_attribute(values: &[f64], rule: &AttrQuant) -> Result<Quantized> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("cannot quantize non-finite values".into()));
    }
    let (lo, hi) = match rule.clip {
        Some(r) => r,
        None => observed_range(values),
    };
    if !(hi > lo) {
        return Err(Error::Spec(alloc::format!("clip range [{lo}, {hi}] is empty")));
    }
    match rule.levels {
        None => Ok(Quantized::Float {
            lo,
            hi,
            values: values.iter().map(|&v| v.clamp(lo, hi) as f32).collect(),
        }),
        Some(q) => {
            if !(2..=65536).contains(&q) {
                return Err(Error::Spec(alloc::format!("quantization levels {q} outside 2..=65536")));
            }
            let steps = (q - 1) as f64;
            let codes = values
                .iter()
                .map(|&v| {
                    let u = (v.clamp(lo, hi) - lo) / (hi - lo);
                    math::round(u * steps) as u16
                })
                .collect();
            Ok(Quantized::Codes { lo, hi, levels: q, codes })
        }
    }
}

pub fn dequantize_attribute(q: &Quantized) -> Vec<f64> {
    match q {
        Quantized::Float { values, .. } => values.iter().map(|&v| v as f64).collect(),
        Quantized::Codes { lo, hi, levels, codes } => {
            let steps = (*levels - 1) as f64;
            codes
                .iter()
                .map(|&c| {
                    let u = c as f64 / steps;
                    lo * (1.0 - u) + hi * u
                })
                .collect()
        }
    }
}

/// Reshape a `side² × 16` feature grid into a `4·side × 4·side` image; channel
/// `c` occupies tile `(c / 4, c % 4)` (tile row, tile column).
pub fn tile_features(grid: &Mat, side: usize) -> Result<Vec<f64>> {
    if grid.rows != side * side || grid.cols != 16 {
        return Err(shape_err!("feature grid is {}x{}, expected {}x16", grid.rows, grid.cols, side * side));
    }
    let w = 4 * side;
    let mut img = vec![0.0; w * w];
    for cell in 0..grid.rows {
        let (x, y) = (cell % side, cell / side);
        for c in 0..16 {
            let (ty, tx) = (c / 4, c % 4);
            img[(ty * side + y) * w + tx * side + x] = grid.get(cell, c);
        }
    }
    Ok(img)
}

pub fn untile_features(img: &[f64], side: usize) -> Result<Mat> {
    let w = 4 * side;
    if img.len() != w * w {
        return Err(shape_err!("feature image has {} pixels, expected {}", img.len(), w * w));
    }
    let mut grid = Mat::zeros(side * side, 16);
    for cell in 0..side * side {
        let (x, y) = (cell % side, cell / side);
        for c in 0..16 {
            let (ty, tx) = (c / 4, c % 4);
            grid.set(cell, c, img[(ty * side + y) * w + tx * side + x]);
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    #[test]
    fn single_gaussian_layout() {
        let l = sort_to_grid(&GaussianSet::zeros(1), 0, 3);
        assert_eq!(l.side, 1);
        assert_eq!(l.permutation, vec![0]);
    }

    #[test]
    fn identical_gaussians_keep_identity() {
        let l = sort_to_grid(&GaussianSet::zeros(4), 0, 3);
        assert_eq!(l.permutation, vec![0, 1, 2, 3]);
        assert_eq!(l.pad_count, 0);
    }

    #[test]
    fn padding_counts() {
        let l = sort_to_grid(&GaussianSet::zeros(10), 0, 3);
        assert_eq!((l.side, l.pad_count), (4, 6));
        l.validate().unwrap();
    }

    #[test]
    fn shuffled_line_halves_dissimilarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut order: Vec<usize> = (0..256).collect();
        order.shuffle(&mut rng);
        let mut g = GaussianSet::zeros(256);
        for (i, &k) in order.iter().enumerate() {
            let t = k as f64 / 255.0;
            g.positions.row_mut(i).copy_from_slice(&[t, 2.0 * t - 0.5, -t]);
        }
        let attrs = sort_attributes(&g);
        let baseline = dissimilarity(&attrs, &GridLayout::identity(256));
        let seeded = morton_seed(&g);
        let sorted = sort_to_grid(&g, 1, 3);
        sorted.validate().unwrap();
        let d = dissimilarity(&attrs, &sorted);
        assert!(d <= 0.5 * baseline, "{d} vs baseline {baseline}");
        assert!(d <= dissimilarity(&attrs, &seeded) + 1e-9);
    }

    #[test]
    fn grid_scatter_round_trip() {
        let mut g = GaussianSet::zeros(7);
        for i in 0..7 {
            g.positions.set(i, 0, (i * i) as f64);
        }
        let l = sort_to_grid(&g, 3, 3);
        let grid = l.to_grid(&g.positions).unwrap();
        assert_eq!(grid.rows, 9);
        assert_eq!(grid.row(8), grid.row(6));
        assert_eq!(l.from_grid(&grid).unwrap(), g.positions);
    }

    #[test]
    fn rotation_clip_and_endpoints() {
        let spec = QuantSpec::default();
        let q = quantize_attribute(&[-1.5, 2.0, 0.5], &spec.rotation).unwrap();
        let d = dequantize_attribute(&q);
        assert_eq!(d[0], -1.0);
        assert_eq!(d[1], 2.0);
        assert!((d[2] - 0.5).abs() <= 3.0 / 254.0);
        let q = quantize_attribute(&[4.0], &spec.opacity).unwrap();
        match &q {
            Quantized::Codes { codes, .. } => assert_eq!(codes[0], 63),
            _ => panic!("opacity should be quantized"),
        }
        assert_eq!(dequantize_attribute(&q)[0], 4.0);
    }

    #[test]
    fn empty_clip_range_is_rejected() {
        let rule = AttrQuant { clip: Some((1.0, 1.0)), levels: Some(64) };
        assert!(matches!(quantize_attribute(&[1.0], &rule), Err(Error::Spec(_))));
    }

    #[test]
    fn tiling_places_channels() {
        let side = 3;
        let grid = Mat::from_fn(9, 16, |cell, c| (cell * 100 + c) as f64);
        let img = tile_features(&grid, side).unwrap();
        // channel 6 → tile row 1, tile col 2; cell 4 = (1, 1)
        assert_eq!(img[(side + 1) * 12 + 2 * side + 1], 406.0);
        assert_eq!(untile_features(&img, side).unwrap(), grid);
    }
}
