//! Canonical Gaussians, per-GOP temporal features and the deformation field that
//! maps them to per-timestamp Gaussians.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::math::{self, Mat, Mat3, Vec3};

/// Width of the temporal MLP output and of every decoder's hidden layer.
pub const HIDDEN: usize = 64;
/// Default temporal feature channels per Gaussian and slot.
pub const FEATURE_DIM: usize = 16;
/// Default number of frequency bands in the time encoding.
pub const TIME_BANDS: usize = 6;

/// Canonical Gaussian attributes, stored pre-activation.
///
/// Scales are log-scales (`exp` at render time), opacities are logits (`sigmoid`
/// at render time), rotations are unnormalized `(w, x, y, z)` quaternions and
/// base colors go through `relu` before use.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub positions: Mat,
    pub scales: Mat,
    pub rotations: Mat,
    pub opacities: Mat,
    pub colors: Mat,
}

impl GaussianSet {
    pub fn zeros(count: usize) -> Self {
        let mut rotations = Mat::zeros(count, 4);
        for r in 0..count {
            rotations.set(r, 0, 1.0);
        }
        Self {
            positions: Mat::zeros(count, 3),
            scales: Mat::zeros(count, 3),
            rotations,
            opacities: Mat::zeros(count, 1),
            colors: Mat::zeros(count, 3),
        }
    }

    pub fn count(&self) -> usize {
        self.positions.rows
    }

    pub fn position(&self, i: usize) -> Vec3 {
        let r = self.positions.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn quaternion(&self, i: usize) -> [f64; 4] {
        let r = self.rotations.row(i);
        [r[0], r[1], r[2], r[3]]
    }

    /// Checks the shared leading dimension and attribute widths, and that every value is finite
    /// with strictly positive finite activated scales.
    pub fn validate(&self) -> Result<()> {
        let n = self.count();
        let widths = [
            ("positions", &self.positions, 3),
            ("scales", &self.scales, 3),
            ("rotations", &self.rotations, 4),
            ("opacities", &self.opacities, 1),
            ("colors", &self.colors, 3),
        ];
        for (name, m, w) in widths {
            if m.rows != n || m.cols != w {
                return Err(shape_err!(
                    "{name} is {}x{}, expected {n}x{w}",
                    m.rows,
                    m.cols
                ));
            }
            if !m.is_finite() {
                return Err(Error::InvalidModel(format!("{name} contains non-finite values")));
            }
        }
        if self
            .scales
            .data
            .iter()
            .any(|&s| !(math::exp(s) > 0.0 && math::exp(s).is_finite()))
        {
            return Err(Error::InvalidModel("activated scale not positive/finite".into()));
        }
        Ok(())
    }

    /// Keep only the Gaussians whose index satisfies `keep`.
    pub fn retain(&self, keep: &[bool]) -> GaussianSet {
        let pick = |m: &Mat| {
            let mut data = Vec::new();
            let mut rows = 0;
            for (r, &k) in keep.iter().enumerate() {
                if k {
                    data.extend_from_slice(m.row(r));
                    rows += 1;
                }
            }
            Mat {
                rows,
                cols: m.cols,
                data,
            }
        };
        GaussianSet {
            positions: pick(&self.positions),
            scales: pick(&self.scales),
            rotations: pick(&self.rotations),
            opacities: pick(&self.opacities),
            colors: pick(&self.colors),
        }
    }
}

/// The `E = G + W - 1` temporal feature slots of one GOP.
///
/// Slot `j` serves frames `j - W + 1 ..= j`; frame `i` reads slots `i .. i + W`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalFeatureBank {
    pub gop_length: usize,
    pub window: usize,
    pub feature_dim: usize,
    pub count: usize,
    /// `(slot * count + gaussian) × feature_dim`.
    pub features: Mat,
}

/// Number of feature slots needed by a GOP of `gop_length` frames and window `window`.
pub fn slot_count(gop_length: usize, window: usize) -> usize {
    gop_length + window - 1
}

impl TemporalFeatureBank {
    pub fn zeros(gop_length: usize, window: usize, feature_dim: usize, count: usize) -> Result<Self> {
        if gop_length == 0 {
            return Err(Error::Spec("GOP length must be at least 1".into()));
        }
        if window == 0 || window % 2 == 0 {
            return Err(Error::Spec(format!("window must be odd, got {window}")));
        }
        if feature_dim == 0 {
            return Err(Error::Spec("feature_dim must be at least 1".into()));
        }
        let slots = slot_count(gop_length, window);
        Ok(Self {
            gop_length,
            window,
            feature_dim,
            count,
            features: Mat::zeros(slots * count, feature_dim),
        })
    }

    pub fn slots(&self) -> usize {
        slot_count(self.gop_length, self.window)
    }

    pub fn validate(&self, count: usize) -> Result<()> {
        if self.count != count {
            return Err(shape_err!(
                "feature bank covers {} Gaussians, model has {count}",
                self.count
            ));
        }
        if self.features.rows != self.slots() * self.count || self.features.cols != self.feature_dim {
            return Err(shape_err!(
                "feature storage is {}x{}, expected {}x{}",
                self.features.rows,
                self.features.cols,
                self.slots() * self.count,
                self.feature_dim
            ));
        }
        if !self.features.is_finite() {
            return Err(Error::InvalidModel("temporal features contain non-finite values".into()));
        }
        Ok(())
    }

    /// Feature vector of Gaussian `g` in slot `slot`.
    pub fn slot_row(&self, slot: usize, g: usize) -> &[f64] {
        self.features.row(slot * self.count + g)
    }

    pub fn slot_row_mut(&mut self, slot: usize, g: usize) -> &mut [f64] {
        let n = self.count;
        self.features.row_mut(slot * n + g)
    }

    /// Slot matrix (`count × feature_dim`) of one slot.
    pub fn slot(&self, slot: usize) -> Mat {
        let n = self.count;
        let f = self.feature_dim;
        Mat {
            rows: n,
            cols: f,
            data: self.features.data[slot * n * f..(slot + 1) * n * f].to_vec(),
        }
    }

    /// Rebuild with the Gaussians selected by `keep`.
    pub fn retain(&self, keep: &[bool]) -> TemporalFeatureBank {
        let count = keep.iter().filter(|&&k| k).count();
        let mut data = Vec::with_capacity(self.slots() * count * self.feature_dim);
        for s in 0..self.slots() {
            for (g, &k) in keep.iter().enumerate() {
                if k {
                    data.extend_from_slice(self.slot_row(s, g));
                }
            }
        }
        TemporalFeatureBank {
            count,
            features: Mat {
                rows: self.slots() * count,
                cols: self.feature_dim,
                data,
            },
            ..*self
        }
    }
}

/// Bias-free linear layer computing `x · weight` (`weight` is `in × out`).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Mat,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Mat::zeros(input, output),
        }
    }

    /// Uniform Glorot initialisation scaled by `gain`.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain * math::sqrt(6.0 / (input + output) as f64);
        let weight = Mat::from_fn(input, output, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * bound);
        Self { weight }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        x.matmul(&self.weight)
    }
}

/// Two bias-free linear layers with a ReLU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            hidden: Linear::zeros(input, HIDDEN),
            output: Linear::zeros(HIDDEN, output),
        }
    }

    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, out_gain: f64, rng: &mut R) -> Self {
        Self {
            hidden: Linear::random(input, HIDDEN, 1.0, rng),
            output: Linear::random(HIDDEN, output, out_gain, rng),
        }
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        let h = self.hidden.forward(x)?.map(|v| v.max(0.0));
        self.output.forward(&h)
    }
}

/// Temporal MLP plus the velocity, covariance, opacity and color decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub time_bands: usize,
    pub temporal: Linear,
    pub velocity: Mlp,
    pub covariance: Mlp,
    pub opacity: Mlp,
    pub color: Mlp,
}

impl DeformationField {
    pub fn zeros(window: usize, feature_dim: usize, time_bands: usize) -> Self {
        Self {
            time_bands,
            temporal: Linear::zeros(window * feature_dim + 2 * time_bands, HIDDEN),
            velocity: Mlp::zeros(HIDDEN, 3),
            covariance: Mlp::zeros(HIDDEN, 7),
            opacity: Mlp::zeros(HIDDEN + 3, 1),
            color: Mlp::zeros(HIDDEN + 3, 3),
        }
    }

    /// Random initialisation; decoder output layers start small so the initial
    /// deformation is close to the identity.
    pub fn random<R: Rng + ?Sized>(
        window: usize,
        feature_dim: usize,
        time_bands: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            time_bands,
            temporal: Linear::random(window * feature_dim + 2 * time_bands, HIDDEN, 1.0, rng),
            velocity: Mlp::random(HIDDEN, 3, out_gain, rng),
            covariance: Mlp::random(HIDDEN, 7, out_gain, rng),
            opacity: Mlp::random(HIDDEN + 3, 1, out_gain, rng),
            color: Mlp::random(HIDDEN + 3, 3, out_gain, rng),
        }
    }

    /// All layers in serialization order.
    pub fn layers(&self) -> [&Linear; 9] {
        [
            &self.temporal,
            &self.velocity.hidden,
            &self.velocity.output,
            &self.covariance.hidden,
            &self.covariance.output,
            &self.opacity.hidden,
            &self.opacity.output,
            &self.color.hidden,
            &self.color.output,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut Linear; 9] {
        [
            &mut self.temporal,
            &mut self.velocity.hidden,
            &mut self.velocity.output,
            &mut self.covariance.hidden,
            &mut self.covariance.output,
            &mut self.opacity.hidden,
            &mut self.opacity.output,
            &mut self.color.hidden,
            &mut self.color.output,
        ]
    }

    pub fn validate(&self, window: usize, feature_dim: usize) -> Result<()> {
        let expected = [
            (window * feature_dim + 2 * self.time_bands, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, 3),
            (HIDDEN, HIDDEN),
            (HIDDEN, 7),
            (HIDDEN + 3, HIDDEN),
            (HIDDEN, 1),
            (HIDDEN + 3, HIDDEN),
            (HIDDEN, 3),
        ];
        for (k, (layer, (i, o))) in self.layers().iter().zip(expected).enumerate() {
            if layer.input_dim() != i || layer.output_dim() != o {
                return Err(shape_err!(
                    "layer {k} is {}x{}, expected {i}x{o}",
                    layer.input_dim(),
                    layer.output_dim()
                ));
            }
            if !layer.weight.is_finite() {
                return Err(Error::InvalidModel(format!("layer {k} has non-finite weights")));
            }
        }
        Ok(())
    }
}

/// Pinhole camera with an OpenCV-style frame (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Mat3,
    pub world_to_camera: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
    pub view_dir: Vec3,
}

impl CameraModel {
    pub fn new(intrinsics: Mat3, world_to_camera: [[f64; 4]; 4], width: usize, height: usize) -> Result<Self> {
        let k = &intrinsics;
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) || k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
            return Err(Error::Spec("intrinsics must be upper-triangular with positive focals".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Spec("camera resolution must be nonzero".into()));
        }
        let rot = rotation_block(&world_to_camera);
        let rrt = math::mat3_mul(&rot, &math::mat3_transpose(&rot));
        for (i, row) in rrt.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                if (v - target).abs() > 1e-6 {
                    return Err(Error::Spec("world-to-camera rotation is not orthonormal".into()));
                }
            }
        }
        let view_dir = rot[2];
        Ok(Self {
            intrinsics,
            world_to_camera,
            width,
            height,
            view_dir,
        })
    }

    /// Simple pinhole intrinsics with the principal point at the image centre.
    pub fn pinhole(fx: f64, fy: f64, width: usize, height: usize) -> Mat3 {
        [
            [fx, 0.0, width as f64 / 2.0],
            [0.0, fy, height as f64 / 2.0],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, intrinsics: Mat3, width: usize, height: usize) -> Result<Self> {
        let fwd = math::sub3(&target, &eye);
        if math::norm3(&fwd) < 1e-12 {
            return Err(Error::Spec("camera eye coincides with its target".into()));
        }
        let fwd = math::normalize3(&fwd);
        let right = math::cross3(&fwd, &up);
        if math::norm3(&right) < 1e-12 {
            return Err(Error::Spec("camera up vector parallel to view direction".into()));
        }
        let right = math::normalize3(&right);
        let down = math::cross3(&fwd, &right);
        let rot = [right, down, fwd];
        let t = math::mat3_vec(&rot, &eye);
        let mut w = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                w[i][j] = rot[i][j];
            }
            w[i][3] = -t[i];
        }
        w[3][3] = 1.0;
        Self::new(intrinsics, w, width, height)
    }

    pub fn rotation(&self) -> Mat3 {
        rotation_block(&self.world_to_camera)
    }

    pub fn translation(&self) -> Vec3 {
        let w = &self.world_to_camera;
        [w[0][3], w[1][3], w[2][3]]
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        let r = self.rotation();
        let t = self.translation();
        let rt = math::mat3_transpose(&r);
        let c = math::mat3_vec(&rt, &t);
        [-c[0], -c[1], -c[2]]
    }

    /// Same pose with the image (and intrinsics) scaled by `factor`.
    pub fn scaled(&self, factor: usize) -> CameraModel {
        let mut k = self.intrinsics;
        for row in k.iter_mut().take(2) {
            for v in row.iter_mut() {
                *v *= factor as f64;
            }
        }
        CameraModel {
            intrinsics: k,
            width: self.width * factor,
            height: self.height * factor,
            ..self.clone()
        }
    }
}

fn rotation_block(w: &[[f64; 4]; 4]) -> Mat3 {
    [
        [w[0][0], w[0][1], w[0][2]],
        [w[1][0], w[1][1], w[1][2]],
        [w[2][0], w[2][1], w[2][2]],
    ]
}

/// Per-Gaussian attribute offsets predicted for one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDeformation {
    pub d_position: Mat,
    pub d_scale: Mat,
    pub d_rotation: Mat,
    pub d_opacity: Mat,
    pub d_color: Mat,
    /// Temporal MLP output the offsets were decoded from.
    pub temporal: Mat,
}

impl FrameDeformation {
    pub fn zeros(count: usize) -> Self {
        Self {
            d_position: Mat::zeros(count, 3),
            d_scale: Mat::zeros(count, 3),
            d_rotation: Mat::zeros(count, 4),
            d_opacity: Mat::zeros(count, 1),
            d_color: Mat::zeros(count, 3),
            temporal: Mat::zeros(count, HIDDEN),
        }
    }
}

/// Sinusoidal encoding `(sin(2^l π t), cos(2^l π t))` for `l = 0..bands`.
pub fn positional_encode(t: f64, bands: usize) -> Result<alloc::vec::Vec<f64>> {
    if !t.is_finite() {
        return Err(Error::Domain(format!("cannot encode non-finite time {t}")));
    }
    if bands == 0 {
        return Err(Error::Domain("encoding needs at least one band".into()));
    }
    let mut out = Vec::with_capacity(2 * bands);
    let mut freq = math::PI;
    for _ in 0..bands {
        out.push(math::sin(freq * t));
        out.push(math::cos(freq * t));
        freq *= 2.0;
    }
    Ok(out)
}

/// Concatenate the `W` feature slots read by frame `frame` (`N × W·feature_dim`).
pub fn window_features(bank: &TemporalFeatureBank, frame: usize) -> Result<Mat> {
    if frame >= bank.gop_length {
        return Err(Error::Index {
            index: frame,
            len: bank.gop_length,
        });
    }
    let f = bank.feature_dim;
    let mut out = Mat::zeros(bank.count, bank.window * f);
    for g in 0..bank.count {
        let dst = out.row_mut(g);
        for k in 0..bank.window {
            dst[k * f..(k + 1) * f].copy_from_slice(bank.slot_row(frame + k, g));
        }
    }
    Ok(out)
}

/// Timestamp of frame `frame` normalized by the GOP length into `[0, 1]`.
pub fn normalized_time(frame: usize, gop_length: usize) -> f64 {
    if gop_length <= 1 {
        0.0
    } else {
        frame as f64 / (gop_length - 1) as f64
    }
}

/// `tanh(D_t([fe, γ(t)]))`.
pub fn temporal_forward(field: &DeformationField, window: &Mat, t: f64) -> Result<Mat> {
    let enc = positional_encode(t, field.time_bands)?;
    if window.cols + enc.len() != field.temporal.input_dim() {
        return Err(shape_err!(
            "temporal MLP expects {} inputs, got {} features + {} encoding",
            field.temporal.input_dim(),
            window.cols,
            enc.len()
        ));
    }
    if !window.is_finite() {
        return Err(Error::Domain("window features are not finite".into()));
    }
    let enc_rows = Mat::from_fn(window.rows, enc.len(), |_, c| enc[c]);
    let input = Mat::hcat(&[window, &enc_rows])?;
    Ok(field.temporal.forward(&input)?.map(math::tanh))
}

/// Accepts a view direction within 1e-3 of unit norm and renormalizes it.
pub fn checked_view_dir(view_dir: &Vec3) -> Result<Vec3> {
    let n = math::norm3(view_dir);
    if !n.is_finite() || (n - 1.0).abs() > 1e-3 {
        return Err(Error::Domain(format!("view direction norm {n} is not unit")));
    }
    Ok([view_dir[0] / n, view_dir[1] / n, view_dir[2] / n])
}

/// Decode attribute offsets from the temporal feature `temporal` (`N × 64`).
pub fn decode_deformation(field: &DeformationField, temporal: &Mat, view_dir: &Vec3) -> Result<FrameDeformation> {
    let view = checked_view_dir(view_dir)?;
    if temporal.cols != HIDDEN {
        return Err(shape_err!("temporal feature has {} columns, expected {HIDDEN}", temporal.cols));
    }
    let views = Mat::from_fn(temporal.rows, 3, |_, c| view[c]);
    let with_view = Mat::hcat(&[temporal, &views])?;
    let d_position = field.velocity.forward(temporal)?;
    let cov = field.covariance.forward(temporal)?;
    let d_opacity = field.opacity.forward(&with_view)?.map(math::tanh);
    let d_color = field.color.forward(&with_view)?;
    Ok(FrameDeformation {
        d_position,
        d_scale: cov.cols_range(0, 3),
        d_rotation: cov.cols_range(3, 7),
        d_opacity,
        d_color,
        temporal: temporal.clone(),
    })
}

/// Apply offsets to the canonical set: additive on position/scale/rotation/opacity
/// logits, `relu(C) + ΔC` on color.
pub fn deform(canonical: &GaussianSet, d: &FrameDeformation) -> Result<GaussianSet> {
    let n = canonical.count();
    if d.d_position.rows != n || d.d_color.rows != n {
        return Err(shape_err!(
            "deformation covers {} Gaussians, canonical set has {n}",
            d.d_position.rows
        ));
    }
    let add = |a: &Mat, b: &Mat| -> Result<Mat> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(shape_err!("offset {}x{} vs attribute {}x{}", b.rows, b.cols, a.rows, a.cols));
        }
        Ok(Mat {
            rows: a.rows,
            cols: a.cols,
            data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        })
    };
    let colors = Mat {
        rows: n,
        cols: 3,
        data: canonical
            .colors
            .data
            .iter()
            .zip(&d.d_color.data)
            .map(|(c, dc)| c.max(0.0) + dc)
            .collect(),
    };
    let out = GaussianSet {
        positions: add(&canonical.positions, &d.d_position)?,
        scales: add(&canonical.scales, &d.d_scale)?,
        rotations: add(&canonical.rotations, &d.d_rotation)?,
        opacities: add(&canonical.opacities, &d.d_opacity)?,
        colors,
    };
    out.validate()?;
    Ok(out)
}

/// One GOP's complete representation.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamModel {
    pub gaussians: GaussianSet,
    pub features: TemporalFeatureBank,
    pub field: DeformationField,
}

impl StreamModel {
    pub fn validate(&self) -> Result<()> {
        self.gaussians.validate()?;
        self.features.validate(self.gaussians.count())?;
        self.field
            .validate(self.features.window, self.features.feature_dim)
    }

    /// Per-frame Gaussians for `frame`, seen from view direction `view_dir`.
    pub fn frame_gaussians(&self, frame: usize, view_dir: &Vec3) -> Result<GaussianSet> {
        let window = window_features(&self.features, frame)?;
        let t = normalized_time(frame, self.features.gop_length);
        let temporal = temporal_forward(&self.field, &window, t)?;
        let d = decode_deformation(&self.field, &temporal, view_dir)?;
        deform(&self.gaussians, &d)
    }
}
