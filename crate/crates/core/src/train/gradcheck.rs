//! Finite-difference check of the full training loss.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::gaussian::{CameraModel, DeformationField, GaussianSet, StreamModel, TemporalFeatureBank};
use crate::grid::sort_to_grid;
use crate::losses::LossWeights;
use crate::math::{self, Mat};
use crate::render::{self, DynamicMask};

use super::graph::{build_step, Group, StepInputs, Trainable};
use super::noise::{window_noise, NoiseKind};
use super::ops::SpatialGrid;
use super::transformer::{TransformerAux, POSITION_BANDS};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub gaussians: usize,
    pub size: usize,
    pub gop_length: usize,
    pub window: usize,
    pub aux_batch: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen entries per parameter matrix.
    pub max_entries: Option<usize>,
    /// All network weights zero.
    pub zero_weights: bool,
    /// Scale the analytic gradient of one group (negative control).
    pub corrupt: Option<Group>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            gaussians: 16,
            size: 16,
            gop_length: 3,
            window: 3,
            aux_batch: 4,
            step: 1e-4,
            tolerance: 1e-3,
            max_entries: None,
            zero_weights: false,
            corrupt: None,
            seed: 11,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupError {
    pub group: Group,
    pub entries: usize,
    pub max_abs_diff: f64,
    pub max_grad: f64,
    /// `max|analytic − numeric| / max(max|numeric|, max|analytic|, 1e-8)`.
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
    }
}

/// Fixed inputs of the checked loss.
pub struct Fixture {
    pub cam: CameraModel,
    pub aux_positions: Mat,
    pub gt: Vec<f64>,
    pub mask: DynamicMask,
    pub noise: Mat,
    pub batch: Vec<usize>,
    pub grid: SpatialGrid,
    pub frame: usize,
    pub weights: LossWeights,
}

impl Fixture {
    fn inputs(&self) -> StepInputs<'_> {
        StepInputs {
            frame: self.frame,
            cam: &self.cam,
            gt: &self.gt,
            mask: &self.mask,
            noise: Some(&self.noise),
            aux_batch: Some(&self.batch),
            layout: Some(&self.grid),
            temporal_reg: true,
            aux_positions: Some(&self.aux_positions),
            weights: &self.weights,
            sink: None,
        }
    }
}

/// Small random model in front of a camera, with a target image rendered from a
/// perturbed copy of its Gaussians.
pub fn fixture(cfg: &GradCheckConfig) -> Result<(Trainable, Fixture)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.gaussians;
    let mut g = GaussianSet::zeros(n);
    for i in 0..n {
        for k in 0..3 {
            g.positions.set(i, k, rng.random_range(-0.6..0.6));
            g.scales.set(i, k, math::ln(rng.random_range(0.08..0.2)));
            g.colors.set(i, k, rng.random_range(0.15..0.7));
        }
        for k in 0..4 {
            g.rotations.set(i, k, rng.random_range(-1.0..1.0));
        }
        g.opacities.set(i, 0, rng.random_range(-1.0..1.0));
    }
    let mut features = TemporalFeatureBank::zeros(cfg.gop_length, cfg.window, crate::gaussian::FEATURE_DIM, n)?;
    let time_bands = crate::gaussian::TIME_BANDS;
    let (field, aux) = if cfg.zero_weights {
        (
            DeformationField::zeros(cfg.window, crate::gaussian::FEATURE_DIM, time_bands),
            TransformerAux::zeros(time_bands, POSITION_BANDS),
        )
    } else {
        for v in features.features.data.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        (
            DeformationField::random(cfg.window, crate::gaussian::FEATURE_DIM, time_bands, 0.3, &mut rng),
            TransformerAux::random(time_bands, POSITION_BANDS, &mut rng),
        )
    };
    let intr = CameraModel::pinhole(20.0, 20.0, cfg.size, cfg.size);
    let cam = CameraModel::look_at([0.3, -0.4, -3.0], [0.0; 3], [0.0, -1.0, 0.0], intr, cfg.size, cfg.size)?;

    let mut target = g.clone();
    for v in target.positions.data.iter_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    for v in target.colors.data.iter_mut() {
        *v = rng.random_range(0.1..0.9);
    }
    let gt = render::render(&target, &cam)?.0.rgb;
    let mut mask = DynamicMask::all(cfg.size, cfg.size, true);
    for (i, m) in mask.mask.iter_mut().enumerate() {
        *m = (i / cfg.size) % 3 != 0;
    }
    let noise = window_noise(features.features.rows, features.features.cols, 0.001, NoiseKind::Uniform, &mut rng);
    let mut batch = rand::seq::index::sample(&mut rng, n, cfg.aux_batch.min(n)).into_vec();
    batch.sort_unstable();
    let grid = SpatialGrid::new(sort_to_grid(&g, cfg.seed, 2), &g);
    let t = Trainable {
        model: StreamModel {
            gaussians: g,
            features,
            field,
        },
        aux,
    };
    let fx = Fixture {
        aux_positions: t.model.gaussians.positions.clone(),
        cam,
        gt,
        mask,
        noise,
        batch,
        grid,
        frame: cfg.gop_length / 2,
        weights: LossWeights::default(),
    };
    Ok((t, fx))
}

/// Total loss and its analytic gradient for every parameter matrix.
pub fn loss_and_grads(t: &Trainable, fx: &Fixture) -> Result<(f64, Vec<Mat>)> {
    let mut tape = Tape::new();
    let step = build_step(&mut tape, t, &fx.inputs())?;
    let loss = tape.scalar(step.total);
    let grads = tape.backward(step.total)?;
    let out = t
        .params()
        .iter()
        .zip(&step.params.all)
        .map(|((_, m), &v)| grads.get_or_zeros(v, m.rows, m.cols))
        .collect();
    Ok((loss, out))
}

pub fn loss(t: &Trainable, fx: &Fixture) -> Result<f64> {
    let mut tape = Tape::new();
    let step = build_step(&mut tape, t, &fx.inputs())?;
    Ok(tape.scalar(step.total))
}

/// Compare analytic against central-difference gradients for every group.
pub fn grad_check_model(t: &Trainable, fx: &Fixture, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (_, mut analytic) = loss_and_grads(t, fx)?;
    let groups: Vec<Group> = t.params().iter().map(|(g, _)| *g).collect();
    if let Some(bad) = cfg.corrupt {
        for (g, a) in groups.iter().zip(analytic.iter_mut()) {
            if *g == bad {
                *a = a.map(|v| 1.5 * v + 1e-3);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37);
    let mut work = t.clone();
    // (max |a − n|, max |n|, max |a|, entries) per group
    let mut acc: Vec<(Group, f64, f64, f64, usize)> = Group::ALL.iter().map(|&g| (g, 0.0, 0.0, 0.0, 0)).collect();
    for (k, group) in groups.iter().enumerate() {
        let len = analytic[k].len();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(m) if m < len => rand::seq::index::sample(&mut rng, len, m).into_vec(),
            _ => (0..len).collect(),
        };
        let slot = acc.iter_mut().find(|a| a.0 == *group).unwrap();
        for e in entries {
            let orig = t.params()[k].1.data[e];
            work.params_mut()[k].1.data[e] = orig + cfg.step;
            let plus = loss(&work, fx)?;
            work.params_mut()[k].1.data[e] = orig - cfg.step;
            let minus = loss(&work, fx)?;
            work.params_mut()[k].1.data[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[k].data[e];
            slot.1 = slot.1.max((a - numeric).abs());
            slot.2 = slot.2.max(numeric.abs());
            slot.3 = slot.3.max(a.abs());
            slot.4 += 1;
        }
    }
    let groups = acc
        .into_iter()
        .map(|(group, diff, n, a, entries)| GroupError {
            group,
            entries,
            max_abs_diff: diff,
            max_grad: n.max(a),
            rel_error: diff / n.max(a).max(1e-8),
        })
        .collect();
    Ok(GradCheckReport {
        groups,
        tolerance: cfg.tolerance,
    })
}

pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (t, fx) = fixture(cfg)?;
    grad_check_model(&t, &fx, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sampled() -> GradCheckConfig {
        GradCheckConfig {
            max_entries: Some(24),
            ..Default::default()
        }
    }

    #[test]
    fn random_model_passes() {
        let r = grad_check(&sampled()).unwrap();
        for g in &r.groups {
            assert!(g.entries > 0, "{:?}", g.group);
        }
        assert!(r.passed(), "{:#?}", r.groups);
    }

    #[test]
    fn zero_weight_model_passes() {
        let r = grad_check(&GradCheckConfig {
            zero_weights: true,
            ..sampled()
        })
        .unwrap();
        assert!(r.passed(), "{:#?}", r.groups);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let r = grad_check(&GradCheckConfig {
            corrupt: Some(Group::ColorDecoder),
            ..sampled()
        })
        .unwrap();
        assert!(!r.passed());
        let bad = r.groups.iter().find(|g| g.group == Group::ColorDecoder).unwrap();
        assert!(bad.rel_error > 0.1);
    }
}
