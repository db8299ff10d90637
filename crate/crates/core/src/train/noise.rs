//! Training-time perturbation of temporal features.

use rand::Rng;

use crate::math::{self, Mat};

/// Distribution of the window noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseKind {
    /// `λ · U[−0.5, 0.5)` per element.
    #[default]
    Uniform,
    /// `λ · N(0, 1)` per element.
    Gaussian,
}

/// Noise matrix of the given shape; independent per element.
pub fn window_noise<R: Rng + ?Sized>(rows: usize, cols: usize, lambda: f64, kind: NoiseKind, rng: &mut R) -> Mat {
    Mat::from_fn(rows, cols, |_, _| lambda * sample(kind, rng))
}

/// `fe + λ·ε` with independent `ε` for every element of every window block.
pub fn add_window_noise<R: Rng + ?Sized>(fe: &Mat, lambda: f64, kind: NoiseKind, rng: &mut R) -> Mat {
    if lambda == 0.0 {
        return fe.clone();
    }
    let mut out = fe.clone();
    for v in out.data.iter_mut() {
        *v += lambda * sample(kind, rng);
    }
    out
}

fn sample<R: Rng + ?Sized>(kind: NoiseKind, rng: &mut R) -> f64 {
    match kind {
        NoiseKind::Uniform => rng.random::<f64>() - 0.5,
        NoiseKind::Gaussian => standard_normal(rng),
    }
}

/// Box-Muller standard normal sample.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
}
