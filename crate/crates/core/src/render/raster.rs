use alloc::vec;
use alloc::vec::Vec;

use super::ScreenGaussian;
use crate::error::{Error, Result};
use crate::math;

/// Rasterizer constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterSettings {
    /// Per-splat opacity is clamped to `[0, alpha_max]`.
    pub alpha_max: f64,
    /// Accumulation stops once transmittance falls below this value.
    pub min_transmittance: f64,
    /// Contributions with opacity below this value are skipped; also sets the
    /// per-splat bounding box.
    pub alpha_cutoff: f64,
    /// Added to the diagonal of every 2D covariance before inversion (pixels²).
    pub cov_floor: f64,
    pub tile_size: usize,
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self {
            alpha_max: 0.99,
            min_transmittance: 1e-7,
            alpha_cutoff: 1e-10,
            cov_floor: 0.3,
            tile_size: 16,
        }
    }
}

/// An RGB image with values in `[0, 1]`, stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    /// Final per-pixel transmittance, when produced by the rasterizer.
    pub transmittance: Option<Vec<f64>>,
}

impl RenderedImage {
    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
            transmittance: None,
        }
    }

    pub fn from_rgb(width: usize, height: usize, rgb: Vec<f64>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Shape(alloc::format!(
                "{} values for a {width}x{height} RGB image",
                rgb.len()
            )));
        }
        Ok(Self {
            width,
            height,
            rgb,
            transmittance: None,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Luma with (0.299, 0.587, 0.114) weights.
    pub fn luma(&self) -> Vec<f64> {
        self.rgb
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn mse(&self, other: &RenderedImage) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape("image size mismatch".into()));
        }
        let n = self.rgb.len().max(1) as f64;
        Ok(self
            .rgb
            .iter()
            .zip(&other.rgb)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    /// Peak signal-to-noise ratio in dB for unit peak (capped at 100 dB for identical images).
    pub fn psnr(&self, other: &RenderedImage) -> Result<f64> {
        let mse = self.mse(other)?;
        if mse <= 1e-10 {
            return Ok(100.0);
        }
        Ok(-10.0 * math::log10(mse))
    }

    /// 2×2 average pooling (dimensions must be even).
    pub fn downsample2(&self) -> RenderedImage {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = RenderedImage::black(w, h);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut s = 0.0;
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        s += self.rgb[((2 * y + dy) * self.width + 2 * x + dx) * 3 + c];
                    }
                    out.rgb[(y * w + x) * 3 + c] = s / 4.0;
                }
            }
        }
        out
    }
}

/// Counters exposed for benchmarking.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderStats {
    pub splats: usize,
    pub culled: usize,
    pub mean_splats_per_pixel: f64,
}

#[derive(Clone, Copy, Debug)]
struct Prepared {
    conic: [f64; 3],
    cov: [f64; 3],
    det: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

/// Forward state kept for [`rasterize_backward`].
#[derive(Clone, Debug)]
pub struct RasterState {
    width: usize,
    height: usize,
    settings: RasterSettings,
    prepared: Vec<Option<Prepared>>,
    tiles_x: usize,
    tile_lists: Vec<Vec<u32>>,
}

/// Output of [`rasterize_with`].
#[derive(Clone, Debug)]
pub struct Rasterized {
    pub image: RenderedImage,
    pub state: RasterState,
    pub stats: RenderStats,
}

fn prepare(s: &ScreenGaussian, settings: &RasterSettings, width: usize, height: usize) -> Option<Prepared> {
    if !(s.alpha > settings.alpha_cutoff) {
        return None;
    }
    let a = s.cov2d[0] + settings.cov_floor;
    let b = s.cov2d[1];
    let c = s.cov2d[2] + settings.cov_floor;
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    // Pixels with Mahalanobis radius beyond r contribute less than alpha_cutoff.
    let r2 = 2.0 * math::ln(s.alpha / settings.alpha_cutoff);
    let r = math::sqrt(r2.max(0.0));
    let ex = r * math::sqrt(a);
    let ey = r * math::sqrt(c);
    let [mx, my] = s.mean2d;
    let lo_x = math::ceil(mx - ex - 0.5);
    let hi_x = math::floor(mx + ex - 0.5);
    let lo_y = math::ceil(my - ey - 0.5);
    let hi_y = math::floor(my + ey - 0.5);
    if !(hi_x >= 0.0 && hi_y >= 0.0 && lo_x < width as f64 && lo_y < height as f64) {
        return None;
    }
    let x0 = lo_x.max(0.0) as usize;
    let y0 = lo_y.max(0.0) as usize;
    let x1 = (hi_x as usize).min(width - 1);
    let y1 = (hi_y as usize).min(height - 1);
    Some(Prepared {
        conic,
        cov: [a, b, c],
        det,
        x0,
        x1,
        y0,
        y1,
    })
}

#[inline]
fn falloff(p: &Prepared, s: &ScreenGaussian, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let power = -0.5 * (p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy);
    (math::exp(power), dx, dy)
}

/// Rasterize with default settings.
pub fn rasterize(splats: &[ScreenGaussian], width: usize, height: usize) -> RenderedImage {
    rasterize_with(splats, width, height, &RasterSettings::default()).image
}

/// Front-to-back alpha compositing of depth-sorted splats over a black background.
pub fn rasterize_with(
    splats: &[ScreenGaussian],
    width: usize,
    height: usize,
    settings: &RasterSettings,
) -> Rasterized {
    let ts = settings.tile_size.max(1);
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let prepared: Vec<Option<Prepared>> = splats
        .iter()
        .map(|s| prepare(s, settings, width, height))
        .collect();

    let mut order: Vec<u32> = (0..splats.len() as u32)
        .filter(|&i| prepared[i as usize].is_some())
        .collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
        sa.depth
            .total_cmp(&sb.depth)
            .then(sa.source.cmp(&sb.source))
            .then(a.cmp(&b))
    });
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let p = prepared[i as usize].as_ref().unwrap();
        for ty in p.y0 / ts..=p.y1 / ts {
            for tx in p.x0 / ts..=p.x1 / ts {
                tile_lists[ty * tiles_x + tx].push(i);
            }
        }
    }

    let mut rgb = vec![0.0; width * height * 3];
    let mut trans = vec![1.0; width * height];
    let mut contributions = 0usize;
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let list = &tile_lists[ty * tiles_x + tx];
            for y in ty * ts..((ty + 1) * ts).min(height) {
                for x in tx * ts..((tx + 1) * ts).min(width) {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut acc = [0.0; 3];
                    for &i in list {
                        let s = &splats[i as usize];
                        let p = prepared[i as usize].as_ref().unwrap();
                        if x < p.x0 || x > p.x1 || y < p.y0 || y > p.y1 {
                            continue;
                        }
                        let (g, _, _) = falloff(p, s, px, py);
                        let alpha = (s.alpha * g).min(settings.alpha_max);
                        if alpha < settings.alpha_cutoff {
                            continue;
                        }
                        contributions += 1;
                        let w = alpha * t;
                        for c in 0..3 {
                            acc[c] += s.color[c] * w;
                        }
                        t *= 1.0 - alpha;
                        if t < settings.min_transmittance {
                            break;
                        }
                    }
                    let o = (y * width + x) * 3;
                    for c in 0..3 {
                        rgb[o + c] = acc[c].clamp(0.0, 1.0);
                    }
                    trans[y * width + x] = t;
                }
            }
        }
    }
    let pixels = (width * height).max(1) as f64;
    Rasterized {
        image: RenderedImage {
            width,
            height,
            rgb,
            transmittance: Some(trans),
        },
        stats: RenderStats {
            splats: splats.len(),
            culled: 0,
            mean_splats_per_pixel: contributions as f64 / pixels,
        },
        state: RasterState {
            width,
            height,
            settings: *settings,
            prepared,
            tiles_x,
            tile_lists,
        },
    }
}

/// Per-splat gradients produced by [`rasterize_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads {
    pub mean2d: Vec<[f64; 2]>,
    /// Gradient with respect to `(xx, xy, yy)`, the `xy` entry counting the shared off-diagonal once.
    pub cov2d: Vec<[f64; 3]>,
    pub color: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
}

impl SplatGrads {
    fn zeros(n: usize) -> Self {
        Self {
            mean2d: vec![[0.0; 2]; n],
            cov2d: vec![[0.0; 3]; n],
            color: vec![[0.0; 3]; n],
            alpha: vec![0.0; n],
        }
    }
}

/// Gradients of `Σ_pixels ⟨grad_image, image⟩` with respect to every splat parameter.
pub fn rasterize_backward(
    splats: &[ScreenGaussian],
    forward: &Rasterized,
    grad_image: &[f64],
) -> Result<SplatGrads> {
    let state = &forward.state;
    let (width, height) = (state.width, state.height);
    if state.prepared.len() != splats.len() {
        return Err(Error::Usage(alloc::format!(
            "forward state covers {} splats, got {}",
            state.prepared.len(),
            splats.len()
        )));
    }
    if grad_image.len() != width * height * 3 {
        return Err(Error::Usage("gradient image does not match the forward resolution".into()));
    }
    let settings = &state.settings;
    let ts = settings.tile_size.max(1);
    let n = splats.len();
    let mut grads = SplatGrads::zeros(n);
    let mut conic_grad = vec![[0.0f64; 3]; n];

    struct Hit {
        idx: u32,
        alpha: f64,
        g: f64,
        dx: f64,
        dy: f64,
        t: f64,
        clamped: bool,
    }
    let mut hits: Vec<Hit> = Vec::new();
    let tiles_y = height.div_ceil(ts);
    for ty in 0..tiles_y {
        for tx in 0..state.tiles_x {
            let list = &state.tile_lists[ty * state.tiles_x + tx];
            for y in ty * ts..((ty + 1) * ts).min(height) {
                for x in tx * ts..((tx + 1) * ts).min(width) {
                    let o = (y * width + x) * 3;
                    let gpix = [grad_image[o], grad_image[o + 1], grad_image[o + 2]];
                    if gpix == [0.0; 3] {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    hits.clear();
                    let mut t = 1.0;
                    let mut acc = [0.0; 3];
                    for &i in list {
                        let s = &splats[i as usize];
                        let p = state.prepared[i as usize].as_ref().unwrap();
                        if x < p.x0 || x > p.x1 || y < p.y0 || y > p.y1 {
                            continue;
                        }
                        let (g, dx, dy) = falloff(p, s, px, py);
                        let raw = s.alpha * g;
                        let alpha = raw.min(settings.alpha_max);
                        if alpha < settings.alpha_cutoff {
                            continue;
                        }
                        hits.push(Hit {
                            idx: i,
                            alpha,
                            g,
                            dx,
                            dy,
                            t,
                            clamped: raw > settings.alpha_max,
                        });
                        for c in 0..3 {
                            acc[c] += s.color[c] * alpha * t;
                        }
                        t *= 1.0 - alpha;
                        if t < settings.min_transmittance {
                            break;
                        }
                    }
                    // Output clamp to [0, 1] kills the gradient of saturated channels.
                    let mut gc = gpix;
                    for c in 0..3 {
                        if acc[c] > 1.0 || acc[c] < 0.0 {
                            gc[c] = 0.0;
                        }
                    }
                    let mut behind = [0.0; 3];
                    for h in hits.iter().rev() {
                        let i = h.idx as usize;
                        let s = &splats[i];
                        let w = h.alpha * h.t;
                        for c in 0..3 {
                            grads.color[i][c] += gc[c] * w;
                        }
                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            d_alpha += gc[c] * (h.t * s.color[c] - behind[c] / (1.0 - h.alpha));
                        }
                        for c in 0..3 {
                            behind[c] += s.color[c] * w;
                        }
                        if h.clamped {
                            continue;
                        }
                        grads.alpha[i] += d_alpha * h.g;
                        let d_power = d_alpha * h.alpha;
                        let p = state.prepared[i].as_ref().unwrap();
                        grads.mean2d[i][0] += d_power * (p.conic[0] * h.dx + p.conic[1] * h.dy);
                        grads.mean2d[i][1] += d_power * (p.conic[1] * h.dx + p.conic[2] * h.dy);
                        conic_grad[i][0] += d_power * (-0.5 * h.dx * h.dx);
                        conic_grad[i][1] += d_power * (-h.dx * h.dy);
                        conic_grad[i][2] += d_power * (-0.5 * h.dy * h.dy);
                    }
                }
            }
        }
    }
    for i in 0..n {
        let Some(p) = state.prepared[i].as_ref() else {
            continue;
        };
        let [a, b, c] = p.cov;
        let det2 = p.det * p.det;
        let [ga, gb, gc] = conic_grad[i];
        // conic = (c, -b, a) / det
        let d_a = ga * (-c * c / det2) + gb * (b * c / det2) + gc * (-b * b / det2);
        let d_b = ga * (2.0 * b * c / det2) + gb * (-(a * c + b * b) / det2) + gc * (2.0 * a * b / det2);
        let d_c = ga * (-b * b / det2) + gb * (a * b / det2) + gc * (-a * a / det2);
        grads.cov2d[i] = [d_a, d_b, d_c];
    }
    Ok(grads)
}
