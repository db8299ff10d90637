//! Deterministic synthetic dynamic scenes made of Gaussians, rendered from a
//! ring of cameras.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{CameraModel, GaussianSet};
use crate::math::{self, Mat, Vec3};
use crate::render::{self, DynamicMask, RasterSettings, RenderedImage};

/// How the dynamic Gaussians move over the GOP (`t` runs from 0 to 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    /// `p + t · offset`.
    RigidTranslation { offset: Vec3 },
    /// Rotation by `t · angle` radians about a vertical axis through the cluster centre.
    Rotation { angle: f64 },
    /// `p + sin(2π · cycles · t) · amplitude`.
    Oscillation { amplitude: Vec3, cycles: f64 },
    /// Dynamic Gaussians split evenly into a translating, a rotating and an oscillating cluster.
    Multi,
}

impl Motion {
    pub fn name(&self) -> &'static str {
        match self {
            Motion::RigidTranslation { .. } => "translation",
            Motion::Rotation { .. } => "rotation",
            Motion::Oscillation { .. } => "oscillation",
            Motion::Multi => "multi",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub n_static: usize,
    pub n_dynamic: usize,
    pub motion: Motion,
    pub gop_length: usize,
    pub cameras: usize,
    pub width: usize,
    pub height: usize,
    pub camera_radius: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// 240 static + 60 oscillating Gaussians, 8 cameras at 64×64, G = 20.
    pub fn oscillation() -> Self {
        Self {
            n_static: 240,
            n_dynamic: 60,
            motion: Motion::Oscillation {
                amplitude: [0.35, 0.0, 0.0],
                cycles: 1.0,
            },
            gop_length: 20,
            cameras: 8,
            width: 64,
            height: 64,
            camera_radius: 3.0,
            seed: 7,
        }
    }

    pub fn multi_motion() -> Self {
        Self {
            n_static: 210,
            n_dynamic: 90,
            motion: Motion::Multi,
            ..Self::oscillation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.camera_radius > 0.0) || !self.camera_radius.is_finite() {
            return Err(Error::Spec("camera rig radius must be positive".into()));
        }
        if self.cameras == 0 {
            return Err(Error::Spec("scene needs at least one camera".into()));
        }
        if self.gop_length == 0 {
            return Err(Error::Spec("GOP length must be at least 1".into()));
        }
        if self.width == 0 || self.height == 0 || self.width * self.height > 256 * 256 {
            return Err(Error::Spec("resolution must be nonzero and at most 256x256".into()));
        }
        Ok(())
    }
}

/// Ground truth for one synthetic GOP.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    /// Pre-activation Gaussian attributes per frame.
    pub frames: Vec<GaussianSet>,
    /// `true` for dynamic Gaussians.
    pub dynamic: Vec<bool>,
    pub cameras: Vec<CameraModel>,
    /// `images[frame][camera]`.
    pub images: Vec<Vec<RenderedImage>>,
    /// Per camera: pixels where dynamic Gaussians carry at least half the
    /// compositing weight in some frame.
    pub gt_masks: Vec<DynamicMask>,
}

impl SyntheticScene {
    pub fn gop_length(&self) -> usize {
        self.frames.len()
    }

    /// Index of the camera reserved for evaluation.
    pub fn held_out_camera(&self) -> usize {
        self.cameras.len() - 1
    }
}

fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Ring of cameras around the origin, slightly above the equator, looking at the origin.
pub fn camera_ring(count: usize, radius: f64, width: usize, height: usize) -> Result<Vec<CameraModel>> {
    if !(radius > 0.0) {
        return Err(Error::Spec("camera rig radius must be positive".into()));
    }
    let fov = 50.0f64.to_radians();
    let f = width as f64 / (2.0 * math::sin(fov / 2.0) / math::cos(fov / 2.0));
    (0..count)
        .map(|k| {
            let a = 2.0 * math::PI * k as f64 / count as f64;
            let eye = [radius * math::cos(a), -0.35 * radius, radius * math::sin(a)];
            CameraModel::look_at(
                eye,
                [0.0, 0.0, 0.0],
                [0.0, -1.0, 0.0],
                CameraModel::pinhole(f, f, width, height),
                width,
                height,
            )
        })
        .collect()
}

/// Random Gaussians inside an axis-aligned ellipsoid around `center`.
fn cluster(rng: &mut ChaCha8Rng, n: usize, center: Vec3, radius: Vec3, color: (f64, f64), scale: (f64, f64)) -> GaussianSet {
    let mut g = GaussianSet::zeros(n);
    for i in 0..n {
        let p = loop {
            let v: Vec3 = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            if math::norm3(&v) <= 1.0 {
                break v;
            }
        };
        for k in 0..3 {
            g.positions.set(i, k, center[k] + radius[k] * p[k]);
            g.scales.set(i, k, math::ln(rng.random_range(scale.0..scale.1)));
            g.colors.set(i, k, rng.random_range(color.0..color.1));
        }
        let q: [f64; 4] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let qn = math::sqrt(q.iter().map(|v| v * v).sum()).max(1e-3);
        for k in 0..4 {
            g.rotations.set(i, k, q[k] / qn);
        }
        g.opacities.set(i, 0, rng.random_range(1.0..3.0));
    }
    g
}

fn concat(a: &GaussianSet, b: &GaussianSet) -> GaussianSet {
    let cat = |x: &crate::math::Mat, y: &crate::math::Mat| {
        let mut data = x.data.clone();
        data.extend_from_slice(&y.data);
        crate::math::Mat {
            rows: x.rows + y.rows,
            cols: x.cols,
            data,
        }
    };
    GaussianSet {
        positions: cat(&a.positions, &b.positions),
        scales: cat(&a.scales, &b.scales),
        rotations: cat(&a.rotations, &b.rotations),
        opacities: cat(&a.opacities, &b.opacities),
        colors: cat(&a.colors, &b.colors),
    }
}

fn apply_motion(base: &GaussianSet, rows: core::ops::Range<usize>, motion: &Motion, center: Vec3, t: f64, out: &mut GaussianSet) {
    for i in rows {
        let p = base.position(i);
        let q = base.quaternion(i);
        let (np, nq) = match *motion {
            Motion::RigidTranslation { offset } => ([p[0] + t * offset[0], p[1] + t * offset[1], p[2] + t * offset[2]], q),
            Motion::Rotation { angle } => {
                let a = t * angle;
                let (s, c) = (math::sin(a), math::cos(a));
                let d = math::sub3(&p, &center);
                let r = [c * d[0] + s * d[2], d[1], -s * d[0] + c * d[2]];
                let half = [math::cos(a / 2.0), 0.0, math::sin(a / 2.0), 0.0];
                ([center[0] + r[0], center[1] + r[1], center[2] + r[2]], quat_mul(&half, &q))
            }
            Motion::Oscillation { amplitude, cycles } => {
                let s = math::sin(2.0 * math::PI * cycles * t);
                ([p[0] + s * amplitude[0], p[1] + s * amplitude[1], p[2] + s * amplitude[2]], q)
            }
            Motion::Multi => (p, q),
        };
        out.positions.row_mut(i).copy_from_slice(&np);
        out.rotations.row_mut(i).copy_from_slice(&nq);
    }
}

/// Generate trajectories, cameras, ground-truth images and footprint masks.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cameras = camera_ring(spec.cameras, spec.camera_radius, spec.width, spec.height)?;
    // Static Gaussians form a floor slab under the dynamic clusters (world -y is up).
    let background = cluster(&mut rng, spec.n_static, [0.0, 0.35, 0.0], [1.0, 0.1, 1.0], (0.05, 0.5), (0.08, 0.16));

    // (motion, centre, row range) of each dynamic cluster
    let mut groups = Vec::new();
    let mut dynamic_set = GaussianSet::zeros(0);
    let plan: Vec<(Motion, Vec3, usize)> = match spec.motion {
        Motion::Multi => {
            let a = spec.n_dynamic / 3;
            let b = spec.n_dynamic / 3;
            let c = spec.n_dynamic - a - b;
            alloc::vec![
                (Motion::RigidTranslation { offset: [0.0, 0.0, 0.6] }, [-0.45, -0.05, -0.3], a),
                (Motion::Rotation { angle: math::PI }, [0.35, -0.05, 0.25], b),
                (Motion::Oscillation { amplitude: [0.0, -0.25, 0.0], cycles: 1.5 }, [0.0, -0.1, 0.0], c),
            ]
        }
        m => alloc::vec![(m, [0.0, -0.1, 0.0], spec.n_dynamic)],
    };
    let mut offset = spec.n_static;
    for (motion, center, n) in plan {
        let c = cluster(&mut rng, n, center, [0.22; 3], (0.55, 0.95), (0.05, 0.09));
        dynamic_set = concat(&dynamic_set, &c);
        groups.push((motion, center, offset..offset + n));
        offset += n;
    }
    let base = concat(&background, &dynamic_set);
    let n = base.count();
    let dynamic: Vec<bool> = (0..n).map(|i| i >= spec.n_static).collect();

    let g = spec.gop_length;
    let mut frames = Vec::with_capacity(g);
    for i in 0..g {
        let t = crate::gaussian::normalized_time(i, g);
        let mut f = base.clone();
        for (motion, center, rows) in &groups {
            apply_motion(&base, rows.clone(), motion, *center, t, &mut f);
        }
        frames.push(f);
    }

    let mut images = Vec::with_capacity(g);
    for f in &frames {
        let mut row = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            let mut img = render::render(f, cam)?.0;
            img.transmittance = None;
            row.push(img);
        }
        images.push(row);
    }

    let gt_masks = cameras
        .iter()
        .map(|cam| footprint_mask(&frames, &dynamic, cam))
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticScene {
        spec: *spec,
        frames,
        dynamic,
        cameras,
        images,
        gt_masks,
    })
}

/// Sparse starting point cloud standing in for structure-from-motion output:
/// a jittered subsample of the Gaussian centres at `frame` with their colors, plus
/// uniform outliers in the bounding box. Returns `(positions, colors)`.
pub fn initial_points(scene: &SyntheticScene, frame: usize, count: usize, jitter: f64, outlier_fraction: f64, seed: u64) -> (Mat, Mat) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = &scene.frames[frame];
    let n = base.count();
    let outliers = ((count as f64 * outlier_fraction) as usize).min(count);
    let inliers = (count - outliers).min(n);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..n {
        for k in 0..3 {
            lo[k] = lo[k].min(base.positions.get(i, k));
            hi[k] = hi[k].max(base.positions.get(i, k));
        }
    }
    let picks = rand::seq::index::sample(&mut rng, n, inliers).into_vec();
    let total = inliers + outliers;
    let mut positions = Mat::zeros(total, 3);
    let mut colors = Mat::zeros(total, 3);
    for (r, &i) in picks.iter().enumerate() {
        for k in 0..3 {
            positions.set(r, k, base.positions.get(i, k) + jitter * rng.random_range(-1.0..1.0));
            colors.set(r, k, base.colors.get(i, k).max(0.0));
        }
    }
    for r in inliers..total {
        for k in 0..3 {
            positions.set(r, k, rng.random_range(lo[k]..=hi[k]));
            colors.set(r, k, rng.random_range(0.0..1.0));
        }
    }
    (positions, colors)
}

/// Pixels where the dynamic Gaussians' total compositing weight reaches 0.5 in some frame.
fn footprint_mask(frames: &[GaussianSet], dynamic: &[bool], cam: &CameraModel) -> Result<DynamicMask> {
    let mut mask = DynamicMask::all(cam.width, cam.height, false);
    for f in frames {
        // Render dynamic Gaussians white and static ones black: the red channel
        // is then exactly the dynamic compositing weight.
        let mut probe = f.clone();
        for (i, &d) in dynamic.iter().enumerate() {
            let v = if d { 1.0 } else { 0.0 };
            probe.colors.row_mut(i).copy_from_slice(&[v, v, v]);
        }
        let proj = render::project(&probe, cam)?;
        let img = render::rasterize_with(&proj.splats, cam.width, cam.height, &RasterSettings::default()).image;
        for (m, px) in mask.mask.iter_mut().zip(img.rgb.chunks_exact(3)) {
            *m |= px[0] >= 0.5;
        }
    }
    Ok(mask)
}
