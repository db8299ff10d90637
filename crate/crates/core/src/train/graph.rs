//! Loss graph of one training iteration.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::{positional_encode, normalized_time, CameraModel, StreamModel};
use crate::losses::LossWeights;
use crate::math::{Mat, Vec3};
use crate::render::DynamicMask;

use super::ops::{self, ScreenGradSink, SpatialGrid};
use super::transformer::{transformer_forward, TransformerAux};

/// Parameter groups with separate learning-rate schedules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Positions,
    Scales,
    Rotations,
    Opacities,
    Colors,
    Features,
    TemporalMlp,
    VelocityDecoder,
    CovarianceDecoder,
    OpacityDecoder,
    ColorDecoder,
    Transformer,
}

impl Group {
    pub const ALL: [Group; 12] = [
        Group::Positions,
        Group::Scales,
        Group::Rotations,
        Group::Opacities,
        Group::Colors,
        Group::Features,
        Group::TemporalMlp,
        Group::VelocityDecoder,
        Group::CovarianceDecoder,
        Group::OpacityDecoder,
        Group::ColorDecoder,
        Group::Transformer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Group::Positions => "positions",
            Group::Scales => "scales",
            Group::Rotations => "rotations",
            Group::Opacities => "opacities",
            Group::Colors => "colors",
            Group::Features => "features",
            Group::TemporalMlp => "temporal_mlp",
            Group::VelocityDecoder => "velocity_decoder",
            Group::CovarianceDecoder => "covariance_decoder",
            Group::OpacityDecoder => "opacity_decoder",
            Group::ColorDecoder => "color_decoder",
            Group::Transformer => "transformer",
        }
    }

    /// Groups whose rows are indexed by Gaussian.
    pub fn per_gaussian(&self) -> bool {
        matches!(
            self,
            Group::Positions | Group::Scales | Group::Rotations | Group::Opacities | Group::Colors | Group::Features
        )
    }
}

/// Model plus the training-only transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainable {
    pub model: StreamModel,
    pub aux: TransformerAux,
}

impl Trainable {
    /// All parameter matrices with their group, in a fixed order.
    pub fn params(&self) -> Vec<(Group, &Mat)> {
        let m = &self.model;
        let f = &m.field;
        let mut v = alloc::vec![
            (Group::Positions, &m.gaussians.positions),
            (Group::Scales, &m.gaussians.scales),
            (Group::Rotations, &m.gaussians.rotations),
            (Group::Opacities, &m.gaussians.opacities),
            (Group::Colors, &m.gaussians.colors),
            (Group::Features, &m.features.features),
            (Group::TemporalMlp, &f.temporal.weight),
            (Group::VelocityDecoder, &f.velocity.hidden.weight),
            (Group::VelocityDecoder, &f.velocity.output.weight),
            (Group::CovarianceDecoder, &f.covariance.hidden.weight),
            (Group::CovarianceDecoder, &f.covariance.output.weight),
            (Group::OpacityDecoder, &f.opacity.hidden.weight),
            (Group::OpacityDecoder, &f.opacity.output.weight),
            (Group::ColorDecoder, &f.color.hidden.weight),
            (Group::ColorDecoder, &f.color.output.weight),
        ];
        v.extend(self.aux.params().into_iter().map(|p| (Group::Transformer, p)));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(Group, &mut Mat)> {
        let m = &mut self.model;
        let f = &mut m.field;
        let mut v = alloc::vec![
            (Group::Positions, &mut m.gaussians.positions),
            (Group::Scales, &mut m.gaussians.scales),
            (Group::Rotations, &mut m.gaussians.rotations),
            (Group::Opacities, &mut m.gaussians.opacities),
            (Group::Colors, &mut m.gaussians.colors),
            (Group::Features, &mut m.features.features),
            (Group::TemporalMlp, &mut f.temporal.weight),
            (Group::VelocityDecoder, &mut f.velocity.hidden.weight),
            (Group::VelocityDecoder, &mut f.velocity.output.weight),
            (Group::CovarianceDecoder, &mut f.covariance.hidden.weight),
            (Group::CovarianceDecoder, &mut f.covariance.output.weight),
            (Group::OpacityDecoder, &mut f.opacity.hidden.weight),
            (Group::OpacityDecoder, &mut f.opacity.output.weight),
            (Group::ColorDecoder, &mut f.color.hidden.weight),
            (Group::ColorDecoder, &mut f.color.output.weight),
        ];
        v.extend(self.aux.params_mut().into_iter().map(|p| (Group::Transformer, p)));
        v
    }
}

/// Tape variables of every parameter, in [`Trainable::params`] order.
pub struct ParamVars {
    pub all: Vec<Var>,
}

impl ParamVars {
    pub fn new(tape: &mut Tape, t: &Trainable) -> Self {
        Self {
            all: t.params().into_iter().map(|(_, m)| tape.leaf(m.clone())).collect(),
        }
    }

    fn gaussians(&self) -> [Var; 5] {
        [self.all[0], self.all[1], self.all[2], self.all[3], self.all[4]]
    }

    fn features(&self) -> Var {
        self.all[5]
    }

    fn field(&self) -> &[Var] {
        &self.all[6..15]
    }

    fn aux(&self) -> &[Var] {
        &self.all[15..]
    }
}

/// Everything an iteration needs besides the parameters.
pub struct StepInputs<'a> {
    pub frame: usize,
    pub cam: &'a CameraModel,
    pub gt: &'a [f64],
    pub mask: &'a DynamicMask,
    /// Additive window noise over the whole feature bank, if any.
    pub noise: Option<&'a Mat>,
    /// Gaussians sampled for the auxiliary pass; `None` disables it.
    pub aux_batch: Option<&'a [usize]>,
    /// Grid layout for spatial smoothness; `None` disables it.
    pub layout: Option<&'a SpatialGrid>,
    pub temporal_reg: bool,
    /// Canonical positions fed to the transformer's position encoding. This path is
    /// never differentiated; `None` reads the current parameters.
    pub aux_positions: Option<&'a Mat>,
    pub weights: &'a LossWeights,
    /// Screen-gradient sink for the Gaussian-pass render.
    pub sink: Option<ScreenGradSink>,
}

/// Variables of interest in an iteration graph.
pub struct StepGraph {
    pub params: ParamVars,
    pub total: Var,
    pub reconstruction: Var,
    pub aux_ssim: Option<Var>,
    pub spatial: Option<Var>,
    pub temporal: Option<Var>,
    pub opacity: Var,
    pub distill: Option<Var>,
    /// Post-activation per-frame opacities (`N × 1`).
    pub frame_opacity: Var,
}

fn mlp(tape: &mut Tape, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.relu(h);
    tape.matmul(h, w2)
}

fn repeat_row(row: &[f64], n: usize) -> Mat {
    Mat::from_fn(n, row.len(), |_, c| row[c])
}

/// `tanh(D_t([window, γ(t)]))` for the given window variable and per-row times.
fn temporal(tape: &mut Tape, window: Var, times: &[f64], field: &[Var], bands: usize) -> Result<Var> {
    let rows = tape.value(window).rows;
    let per = rows / times.len().max(1);
    let mut enc = Mat::zeros(rows, 2 * bands);
    for (j, &t) in times.iter().enumerate() {
        let e = positional_encode(t, bands)?;
        for r in j * per..(j + 1) * per {
            enc.row_mut(r).copy_from_slice(&e);
        }
    }
    let enc = tape.constant(enc);
    let input = tape.hcat(&[window, enc])?;
    let h = tape.matmul(input, field[0])?;
    Ok(tape.tanh(h))
}

/// Apply the four decoders to `temporal` and deform the canonical attributes.
fn deform(tape: &mut Tape, canonical: [Var; 5], temporal: Var, field: &[Var], view: &Vec3) -> Result<[Var; 5]> {
    let n = tape.value(temporal).rows;
    let dv = mlp(tape, temporal, field[1], field[2])?;
    let cov = mlp(tape, temporal, field[3], field[4])?;
    let ds = tape.slice_cols(cov, 0, 3)?;
    let dq = tape.slice_cols(cov, 3, 7)?;
    let views = tape.constant(repeat_row(view, n));
    let tv = tape.hcat(&[temporal, views])?;
    let dop = mlp(tape, tv, field[5], field[6])?;
    let dop = tape.tanh(dop);
    let dc = mlp(tape, tv, field[7], field[8])?;
    let [p, s, q, o, c] = canonical;
    let pos = tape.add(p, dv)?;
    let sc = tape.add(s, ds)?;
    let rot = tape.add(q, dq)?;
    let op = tape.add(o, dop)?;
    let base_c = tape.relu(c);
    let col = tape.add(base_c, dc)?;
    Ok([pos, sc, rot, op, col])
}

/// Canonical positions normalized to their bounding box.
fn normalized_positions(positions: &Mat, rows: &[usize]) -> Mat {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for r in 0..positions.rows {
        for k in 0..3 {
            lo[k] = lo[k].min(positions.get(r, k));
            hi[k] = hi[k].max(positions.get(r, k));
        }
    }
    Mat::from_fn(rows.len(), 3, |r, k| {
        let range = hi[k] - lo[k];
        if range > 0.0 {
            (positions.get(rows[r], k) - lo[k]) / range
        } else {
            0.0
        }
    })
}

/// Build the full two-pass loss of one iteration.
pub fn build_step(tape: &mut Tape, t: &Trainable, inp: &StepInputs) -> Result<StepGraph> {
    let model = &t.model;
    let bank = &model.features;
    let n = bank.count;
    let (g_len, w) = (bank.gop_length, bank.window);
    if inp.frame >= g_len {
        return Err(Error::Index {
            index: inp.frame,
            len: g_len,
        });
    }
    let bands = model.field.time_bands;
    let params = ParamVars::new(tape, t);
    let field: Vec<Var> = params.field().to_vec();
    let features = params.features();
    let fe = match inp.noise {
        Some(noise) => {
            let nv = tape.constant(noise.clone());
            tape.add(features, nv)?
        }
        None => features,
    };

    // Gaussian pass
    let mut slots = Vec::with_capacity(w);
    for k in 0..w {
        let s = inp.frame + k;
        slots.push(tape.slice_rows(fe, s * n, (s + 1) * n)?);
    }
    let window = tape.hcat(&slots)?;
    let t_i = normalized_time(inp.frame, g_len);
    let temporal_i = temporal(tape, window, &[t_i], &field, bands)?;
    let deformed = deform(tape, params.gaussians(), temporal_i, &field, &inp.cam.view_dir)?;
    let img = ops::render(tape, deformed, inp.cam, inp.sink.clone())?;
    let reconstruction = ops::reconstruction(tape, img, inp.gt, inp.mask, inp.weights.beta)?;
    let frame_opacity = tape.sigmoid(deformed[3]);
    let abs_o = tape.abs(frame_opacity);
    let opacity = tape.mean(abs_o);

    let mut terms = alloc::vec![(reconstruction, 1.0), (opacity, inp.weights.opacity)];

    let spatial = match inp.layout {
        Some(grid) => {
            let mut acc = None;
            for (a, inv) in params.gaussians().into_iter().zip(&grid.inv_range) {
                let s = ops::spatial_smoothness(tape, a, &grid.layout, inv, inp.weights.spatial_sigma)?;
                acc = Some(match acc {
                    None => s,
                    Some(p) => tape.add(p, s)?,
                });
            }
            let s = acc.unwrap();
            terms.push((s, 1.0));
            Some(s)
        }
        None => None,
    };

    let temporal_reg = if inp.temporal_reg {
        let e = bank.slots();
        let c = inp.frame + (w - 1) / 2;
        let slot = |tape: &mut Tape, s: usize| tape.slice_rows(features, s * n, (s + 1) * n);
        let prev = slot(tape, c.saturating_sub(1))?;
        let cur = slot(tape, c)?;
        let next = slot(tape, (c + 1).min(e - 1))?;
        let d1 = tape.sub(prev, cur)?;
        let d2 = tape.sub(cur, next)?;
        let h1 = tape.huber(d1, inp.weights.huber_delta);
        let h2 = tape.huber(d2, inp.weights.huber_delta);
        let m1 = tape.mean(h1);
        let m2 = tape.mean(h2);
        let l = tape.weighted_sum(&[(m1, 0.5), (m2, 0.5)])?;
        terms.push((l, inp.weights.temporal));
        Some(l)
    } else {
        None
    };

    // Auxiliary pass
    let (mut aux_ssim, mut distill) = (None, None);
    if let Some(batch) = inp.aux_batch.filter(|b| !b.is_empty()) {
        let bsz = batch.len();
        let mut cols = Vec::with_capacity(w);
        for k in 0..w {
            let idx: Vec<usize> = (0..g_len)
                .flat_map(|j| batch.iter().map(move |&b| (j + k) * n + b))
                .collect();
            cols.push(tape.gather_rows(fe, &idx)?);
        }
        let windows = tape.hcat(&cols)?;
        let times: Vec<f64> = (0..g_len).map(|j| normalized_time(j, g_len)).collect();
        let temporal_all = temporal(tape, windows, &times, &field, bands)?;
        let pos = normalized_positions(inp.aux_positions.unwrap_or(&model.gaussians.positions), batch);
        let f_prime = transformer_forward(tape, &t.aux, params.aux(), temporal_all, &times, &pos)?;
        let f_prime_i = tape.slice_rows(f_prime, inp.frame * bsz, (inp.frame + 1) * bsz)?;
        let mixed = tape.scatter_rows(temporal_i, f_prime_i, batch)?;
        let aux_deformed = deform(tape, params.gaussians(), mixed, &field, &inp.cam.view_dir)?;
        let aux_img = ops::render(tape, aux_deformed, inp.cam, None)?;
        let l_t = ops::dssim(tape, aux_img, inp.gt, inp.cam.width, inp.cam.height)?;
        let f_i = tape.gather_rows(temporal_i, batch)?;
        let diff = tape.sub(f_i, f_prime_i)?;
        let ad = tape.abs(diff);
        let l_sd = tape.mean(ad);
        terms.push((l_t, inp.weights.aux));
        terms.push((l_sd, inp.weights.distill));
        aux_ssim = Some(l_t);
        distill = Some(l_sd);
    }

    let total = tape.weighted_sum(&terms)?;
    Ok(StepGraph {
        params,
        total,
        reconstruction,
        aux_ssim,
        spatial,
        temporal: temporal_reg,
        opacity,
        distill,
        frame_opacity,
    })
}

/// Static pre-fit loss: canonical Gaussians rendered without deformation.
pub fn build_coarse(tape: &mut Tape, t: &Trainable, cam: &CameraModel, gt: &[f64], mask: &DynamicMask, beta: f64) -> Result<(ParamVars, Var)> {
    let params = ParamVars::new(tape, t);
    let g = params.gaussians();
    let c = tape.relu(g[4]);
    let img = ops::render(tape, [g[0], g[1], g[2], g[3], c], cam, None)?;
    let loss = ops::reconstruction(tape, img, gt, mask, beta)?;
    Ok((params, loss))
}
