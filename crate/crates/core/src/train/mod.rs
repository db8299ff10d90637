//! Per-GOP optimization.

pub mod adam;
pub mod density;
pub mod gradcheck;
pub mod graph;
pub mod noise;
pub mod ops;
pub mod transformer;

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gaussian::{CameraModel, DeformationField, GaussianSet, StreamModel, TemporalFeatureBank, FEATURE_DIM, TIME_BANDS};
use crate::grid::{sort_to_grid, GridLayout};
use crate::losses::{LossComponents, LossWeights};
use crate::math::{self, Mat};
use crate::pipeline;
use crate::render::{compute_dynamic_mask, DynamicMask, RenderedImage, DEFAULT_MASK_THRESHOLD, MASK_FRAMES};

pub use adam::{Adam, Schedule};
pub use density::{densify_and_prune, DensityConfig, DensityReport, GradStats, OpacityStats};
pub use graph::{Group, Trainable};
pub use noise::{add_window_noise, NoiseKind};
pub use ops::SpatialGrid;
pub use transformer::TransformerAux;

/// Learning-rate schedule of every parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub positions: Schedule,
    pub scales: Schedule,
    pub rotations: Schedule,
    pub opacities: Schedule,
    pub colors: Schedule,
    pub features: Schedule,
    pub temporal: Schedule,
    pub velocity: Schedule,
    pub covariance: Schedule,
    pub opacity_decoder: Schedule,
    pub color_decoder: Schedule,
    pub transformer: Schedule,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            positions: Schedule::decay(1.6e-3, 1.6e-5),
            scales: Schedule::constant(0.005),
            rotations: Schedule::constant(0.001),
            opacities: Schedule::constant(0.05),
            colors: Schedule::constant(0.0025),
            features: Schedule::constant(0.0025),
            temporal: Schedule::decay(0.0025, 0.000025),
            velocity: Schedule::decay(0.005, 0.00005),
            covariance: Schedule::constant(0.04),
            opacity_decoder: Schedule::decay(0.002, 0.00002),
            color_decoder: Schedule::decay(0.008, 0.00005),
            transformer: Schedule::decay(0.002, 0.00001),
        }
    }
}

impl LearningRates {
    pub fn get(&self, g: Group) -> Schedule {
        match g {
            Group::Positions => self.positions,
            Group::Scales => self.scales,
            Group::Rotations => self.rotations,
            Group::Opacities => self.opacities,
            Group::Colors => self.colors,
            Group::Features => self.features,
            Group::TemporalMlp => self.temporal,
            Group::VelocityDecoder => self.velocity,
            Group::CovarianceDecoder => self.covariance,
            Group::OpacityDecoder => self.opacity_decoder,
            Group::ColorDecoder => self.color_decoder,
            Group::Transformer => self.transformer,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gop_length: usize,
    pub window: usize,
    pub feature_dim: usize,
    pub time_bands: usize,
    /// Main-stage iterations.
    pub iterations: usize,
    /// Static pre-fit iterations with deformation disabled.
    pub coarse_iterations: usize,
    /// Gaussians sampled per auxiliary pass.
    pub aux_batch: usize,
    pub aux: bool,
    pub temporal_reg: bool,
    pub spatial_reg: bool,
    pub noise_lambda: f64,
    pub noise_kind: NoiseKind,
    pub lr: LearningRates,
    pub weights: LossWeights,
    pub densify_start: usize,
    pub densify_interval: usize,
    pub densify_stop: usize,
    pub grad_threshold: f64,
    pub percent_dense: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
    pub relocation: bool,
    /// Iteration at which the dynamic mask starts gating the SSIM term.
    pub dynamic_start: usize,
    pub mask_threshold: f64,
    /// Grid re-sort period (also re-sorted after every density step).
    pub regrid_interval: usize,
    pub sort_sweeps: usize,
    /// Held-out evaluation period; 0 evaluates only at the end.
    pub eval_interval: usize,
    /// Output gain of the decoders at initialization.
    pub decoder_gain: f64,
    pub feature_init: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(60, 2000)
    }
}

impl TrainConfig {
    /// Desk-scale schedule for `iterations` main-stage steps.
    pub fn desk(gop_length: usize, iterations: usize) -> Self {
        Self {
            gop_length,
            window: 3,
            feature_dim: FEATURE_DIM,
            time_bands: TIME_BANDS,
            iterations,
            coarse_iterations: iterations / 10,
            aux_batch: 64,
            aux: true,
            temporal_reg: true,
            spatial_reg: true,
            noise_lambda: 0.001,
            noise_kind: NoiseKind::Uniform,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            densify_start: iterations / 4,
            densify_interval: (iterations / 20).max(1),
            densify_stop: iterations * 4 / 5,
            grad_threshold: 0.0002,
            percent_dense: 0.01,
            prune_opacity: 0.005,
            max_gaussians: 150_000,
            relocation: true,
            dynamic_start: iterations * 5 / 12,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            regrid_interval: (iterations / 10).max(1),
            sort_sweeps: 4,
            eval_interval: 0,
            decoder_gain: 0.1,
            feature_init: 0.01,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Spec(format!("window must be odd, got {}", self.window)));
        }
        if self.gop_length == 0 || self.feature_dim == 0 {
            return Err(Error::Spec("GOP length and feature width must be positive".into()));
        }
        if self.densify_start >= self.densify_stop && self.densify_stop > 0 {
            return Err(Error::Spec(format!(
                "densification start {} must precede its end {}",
                self.densify_start, self.densify_stop
            )));
        }
        if self.densify_interval == 0 || self.regrid_interval == 0 {
            return Err(Error::Spec("intervals must be positive".into()));
        }
        if !(self.noise_lambda >= 0.0) {
            return Err(Error::Spec("noise scale must be nonnegative".into()));
        }
        if self.max_gaussians == 0 {
            return Err(Error::Spec("Gaussian budget must be positive".into()));
        }
        for g in Group::ALL {
            self.lr.get(g).validate()?;
        }
        Ok(())
    }
}

/// Multi-view frames of one GOP plus a starting point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub cameras: Vec<CameraModel>,
    /// `images[frame][camera]`.
    pub images: Vec<Vec<RenderedImage>>,
    pub train_cameras: Vec<usize>,
    pub eval_cameras: Vec<usize>,
    pub points: Mat,
    pub point_colors: Mat,
}

impl TrainData {
    /// Synthetic scene with the last camera held out for evaluation.
    pub fn from_scene(scene: &crate::synth::SyntheticScene, points: usize, seed: u64) -> Self {
        Self::from_scene_gop(scene, 0, scene.gop_length(), points, seed)
    }

    /// Frames `gop · gop_length ..` of a longer synthetic sequence as one GOP.
    pub fn from_scene_gop(scene: &crate::synth::SyntheticScene, gop: usize, gop_length: usize, points: usize, seed: u64) -> Self {
        let held = scene.held_out_camera();
        let start = (gop * gop_length).min(scene.gop_length().saturating_sub(1));
        let end = (start + gop_length).min(scene.gop_length());
        let (p, c) = crate::synth::initial_points(scene, start, points, 0.02, 0.1, seed);
        Self {
            cameras: scene.cameras.clone(),
            images: scene.images[start..end].to_vec(),
            train_cameras: (0..scene.cameras.len()).filter(|&c| c != held).collect(),
            eval_cameras: vec![held],
            points: p,
            point_colors: c,
        }
    }

    pub fn gop_length(&self) -> usize {
        self.images.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() || self.train_cameras.is_empty() {
            return Err(Error::Spec("training needs at least one frame and one training camera".into()));
        }
        if self.points.rows == 0 || self.points.cols != 3 || self.point_colors.rows != self.points.rows {
            return Err(Error::Spec("initial point cloud must be a nonempty N x 3 set with colors".into()));
        }
        for row in &self.images {
            if row.len() != self.cameras.len() {
                return Err(Error::Spec("every frame needs an image per camera".into()));
            }
        }
        for &c in self.train_cameras.iter().chain(&self.eval_cameras) {
            if c >= self.cameras.len() {
                return Err(Error::Index {
                    index: c,
                    len: self.cameras.len(),
                });
            }
        }
        Ok(())
    }

    /// Radius of the camera centres around their mean, times 1.1.
    pub fn scene_extent(&self) -> f64 {
        let n = self.cameras.len() as f64;
        let mut mean = [0.0; 3];
        for c in &self.cameras {
            let p = c.center();
            for k in 0..3 {
                mean[k] += p[k] / n;
            }
        }
        let r = self
            .cameras
            .iter()
            .map(|c| math::norm3(&math::sub3(&c.center(), &mean)))
            .fold(0.0, f64::max);
        1.1 * r.max(1e-6)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Main,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub stage: Stage,
    pub iteration: usize,
    pub frame: usize,
    pub camera: usize,
    pub losses: LossComponents,
    pub total: f64,
    pub gaussians: usize,
    pub eval_psnr: Option<f64>,
    pub learning_rates: Vec<(&'static str, f64)>,
    pub density: Option<DensityReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub trainable: Trainable,
    pub layout: GridLayout,
    pub metrics: Vec<IterationMetrics>,
    /// Mean held-out PSNR over all frames at the end of training.
    pub eval_psnr: f64,
    /// Mean PSNR over all frames and training cameras.
    pub train_psnr: f64,
}

impl TrainOutput {
    pub fn model(&self) -> &StreamModel {
        &self.trainable.model
    }
}

fn mean_knn_distance(points: &Mat, i: usize, k: usize) -> f64 {
    let p = [points.get(i, 0), points.get(i, 1), points.get(i, 2)];
    let mut d: Vec<f64> = (0..points.rows)
        .filter(|&j| j != i)
        .map(|j| {
            let q = [points.get(j, 0), points.get(j, 1), points.get(j, 2)];
            math::norm3(&math::sub3(&p, &q))
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let k = k.min(d.len());
    if k == 0 {
        return 0.01;
    }
    d[..k].iter().sum::<f64>() / k as f64
}

/// Initial model: one isotropic Gaussian per point, small random temporal
/// features and a near-identity deformation field.
pub fn initialize(data: &TrainData, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Trainable> {
    let n = data.points.rows;
    let mut g = GaussianSet::zeros(n);
    for i in 0..n {
        let s = math::ln(mean_knn_distance(&data.points, i, 3).max(1e-4));
        for k in 0..3 {
            g.positions.set(i, k, data.points.get(i, k));
            g.scales.set(i, k, s);
            g.colors.set(i, k, data.point_colors.get(i, k));
        }
        g.opacities.set(i, 0, math::logit(0.1));
    }
    let mut features = TemporalFeatureBank::zeros(cfg.gop_length, cfg.window, cfg.feature_dim, n)?;
    for v in features.features.data.iter_mut() {
        *v = cfg.feature_init * (rng.random::<f64>() * 2.0 - 1.0);
    }
    let field = DeformationField::random(cfg.window, cfg.feature_dim, cfg.time_bands, cfg.decoder_gain, rng);
    let aux = TransformerAux::random(cfg.time_bands, transformer::POSITION_BANDS, rng);
    Ok(Trainable {
        model: StreamModel {
            gaussians: g,
            features,
            field,
        },
        aux,
    })
}

fn shapes(t: &Trainable) -> Vec<(usize, usize)> {
    t.params().iter().map(|(_, m)| (m.rows, m.cols)).collect()
}

fn dynamic_masks(data: &TrainData, theta: f64) -> Result<Vec<DynamicMask>> {
    let frames = data.images.len().min(MASK_FRAMES);
    data.cameras
        .iter()
        .enumerate()
        .map(|(c, cam)| {
            if frames < 2 {
                return Ok(DynamicMask::all(cam.width, cam.height, true));
            }
            let seq: Vec<RenderedImage> = data.images[..frames].iter().map(|row| row[c].clone()).collect();
            compute_dynamic_mask(&seq, theta)
        })
        .collect()
}

fn state_dump(t: &Trainable) -> alloc::string::String {
    let mut s = format!("{} Gaussians;", t.model.gaussians.count());
    for (g, m) in t.params() {
        let bad = m.data.iter().filter(|v| !v.is_finite()).count();
        let max = m.data.iter().filter(|v| v.is_finite()).fold(0.0f64, |a, v| a.max(v.abs()));
        s.push_str(&format!(" {}: max|x|={max:.3e} non-finite={bad};", g.name()));
    }
    s
}

fn learning_rates(cfg: &TrainConfig, progress: f64) -> Vec<(&'static str, f64)> {
    Group::ALL.iter().map(|g| (g.name(), cfg.lr.get(*g).at(progress))).collect()
}

fn regrid(t: &Trainable, cfg: &TrainConfig, salt: u64) -> SpatialGrid {
    let layout = sort_to_grid(&t.model.gaussians, cfg.seed ^ salt, cfg.sort_sweeps);
    SpatialGrid::new(layout, &t.model.gaussians)
}

/// Train one GOP; `on_iteration` sees every log line as it is produced.
pub fn train_gop_with(data: &TrainData, cfg: &TrainConfig, on_iteration: &mut dyn FnMut(&IterationMetrics)) -> Result<TrainOutput> {
    cfg.validate()?;
    data.validate()?;
    if data.gop_length() != cfg.gop_length {
        return Err(Error::Spec(format!(
            "config GOP length {} but {} frames supplied",
            cfg.gop_length,
            data.gop_length()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut t = initialize(data, cfg, &mut rng)?;
    let mut adam = Adam::new(&shapes(&t));
    let masks = dynamic_masks(data, cfg.mask_threshold)?;
    let mut metrics = Vec::new();
    let g_len = cfg.gop_length;

    for it in 0..cfg.coarse_iterations {
        let frame = rng.random_range(0..g_len);
        let cam_id = data.train_cameras[rng.random_range(0..data.train_cameras.len())];
        let cam = &data.cameras[cam_id];
        let full = DynamicMask::all(cam.width, cam.height, true);
        let mut tape = Tape::new();
        let (params, loss) =
            graph::build_coarse(&mut tape, &t, cam, &data.images[frame][cam_id].rgb, &full, cfg.weights.beta)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                state: state_dump(&t),
            });
        }
        let grads = tape.backward(loss)?;
        let progress = it as f64 / cfg.coarse_iterations as f64;
        for (k, (group, m)) in t.params_mut().into_iter().enumerate().take(5) {
            let g = grads.get_or_zeros(params.all[k], m.rows, m.cols);
            adam.moments[k].update(m, &g, cfg.lr.get(group).at(progress));
        }
        let line = IterationMetrics {
            stage: Stage::Coarse,
            iteration: it,
            frame,
            camera: cam_id,
            losses: LossComponents {
                reconstruction: value,
                ..Default::default()
            },
            total: value,
            gaussians: t.model.gaussians.count(),
            eval_psnr: None,
            learning_rates: learning_rates(cfg, progress),
            density: None,
        };
        on_iteration(&line);
        metrics.push(line);
    }
    // The main stage starts its moments afresh.
    adam = Adam::new(&shapes(&t));

    let mut layout = regrid(&t, cfg, 0);
    let n0 = t.model.gaussians.count();
    let mut opacity_stats = OpacityStats::new(n0);
    let mut grad_stats = GradStats::new(n0);
    let density_cfg = DensityConfig {
        grad_threshold: cfg.grad_threshold,
        percent_dense: cfg.percent_dense,
        scene_extent: data.scene_extent(),
        prune_opacity: cfg.prune_opacity,
        max_gaussians: cfg.max_gaussians,
        relocation: cfg.relocation,
    };

    for it in 0..cfg.iterations {
        let progress = it as f64 / cfg.iterations as f64;
        let frame = rng.random_range(0..g_len);
        let cam_id = data.train_cameras[rng.random_range(0..data.train_cameras.len())];
        let cam = &data.cameras[cam_id];
        let n = t.model.gaussians.count();
        let full;
        let mask = if it >= cfg.dynamic_start {
            &masks[cam_id]
        } else {
            full = DynamicMask::all(cam.width, cam.height, true);
            &full
        };
        let noise = (cfg.noise_lambda > 0.0).then(|| {
            let f = &t.model.features.features;
            noise::window_noise(f.rows, f.cols, cfg.noise_lambda, cfg.noise_kind, &mut rng)
        });
        let batch = (cfg.aux && cfg.aux_batch > 0).then(|| {
            let mut b = rand::seq::index::sample(&mut rng, n, cfg.aux_batch.min(n)).into_vec();
            b.sort_unstable();
            b
        });
        let sink: ops::ScreenGradSink = Rc::new(RefCell::new(vec![-1.0; n]));
        let inputs = graph::StepInputs {
            frame,
            cam,
            gt: &data.images[frame][cam_id].rgb,
            mask,
            noise: noise.as_ref(),
            aux_batch: batch.as_deref(),
            layout: cfg.spatial_reg.then_some(&layout),
            temporal_reg: cfg.temporal_reg,
            aux_positions: None,
            weights: &cfg.weights,
            sink: Some(sink.clone()),
        };
        let mut tape = Tape::new();
        let step = graph::build_step(&mut tape, &t, &inputs)?;
        let total = tape.scalar(step.total);
        if !total.is_finite() {
            return Err(Error::NonFinite {
                iteration: cfg.coarse_iterations + it,
                state: state_dump(&t),
            });
        }
        let grads = tape.backward(step.total)?;
        for (k, (group, m)) in t.params_mut().into_iter().enumerate() {
            let g = grads.get_or_zeros(step.params.all[k], m.rows, m.cols);
            adam.moments[k].update(m, &g, cfg.lr.get(group).at(progress));
        }
        opacity_stats.add(&tape.value(step.frame_opacity).data);
        grad_stats.add(&sink.borrow());

        let opt = |v: Option<usize>| v.map_or(0.0, |v| tape.scalar(v));
        let losses = LossComponents {
            reconstruction: tape.scalar(step.reconstruction),
            aux_ssim: opt(step.aux_ssim),
            spatial: opt(step.spatial),
            temporal: opt(step.temporal),
            opacity: tape.scalar(step.opacity),
            distill: opt(step.distill),
        };
        drop(tape);

        let mut density = None;
        let step_no = it + 1;
        if step_no > cfg.densify_start
            && step_no <= cfg.densify_stop
            && (step_no - cfg.densify_start) % cfg.densify_interval == 0
        {
            let report = densify_and_prune(&mut t, &mut adam, &grad_stats, &opacity_stats, &density_cfg, &mut rng)?;
            let n = t.model.gaussians.count();
            opacity_stats = OpacityStats::new(n);
            grad_stats = GradStats::new(n);
            layout = regrid(&t, cfg, step_no as u64);
            density = Some(report);
        } else if step_no % cfg.regrid_interval == 0 {
            layout = regrid(&t, cfg, step_no as u64);
        }

        let eval_psnr = if cfg.eval_interval > 0 && step_no % cfg.eval_interval == 0 && !data.eval_cameras.is_empty() {
            Some(pipeline::mean_psnr(&t.model, &data.cameras, &data.images, &data.eval_cameras)?)
        } else {
            None
        };
        let line = IterationMetrics {
            stage: Stage::Main,
            iteration: cfg.coarse_iterations + it,
            frame,
            camera: cam_id,
            losses,
            total,
            gaussians: t.model.gaussians.count(),
            eval_psnr,
            learning_rates: learning_rates(cfg, progress),
            density,
        };
        on_iteration(&line);
        metrics.push(line);
    }

    let eval_psnr = if data.eval_cameras.is_empty() {
        0.0
    } else {
        pipeline::mean_psnr(&t.model, &data.cameras, &data.images, &data.eval_cameras)?
    };
    let train_psnr = pipeline::mean_psnr(&t.model, &data.cameras, &data.images, &data.train_cameras)?;
    let layout = regrid(&t, cfg, u64::MAX).layout;
    Ok(TrainOutput {
        trainable: t,
        layout,
        metrics,
        eval_psnr,
        train_psnr,
    })
}

pub fn train_gop(data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_gop_with(data, cfg, &mut |_| {})
}
