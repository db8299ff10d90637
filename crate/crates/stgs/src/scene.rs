//! Scene specs as JSON, the content-hash scene cache, scene metadata and poses.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stgs_core::gaussian::{CameraModel, GaussianSet};
use stgs_core::math::{Mat, Mat3, Vec3};
use stgs_core::render::{DynamicMask, RenderedImage};
use stgs_core::synth::{self, Motion, SceneSpec, SyntheticScene};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MotionJson {
    RigidTranslation { offset: [f64; 3] },
    Rotation { angle: f64 },
    Oscillation { amplitude: [f64; 3], cycles: f64 },
    Multi,
}

/// JSON form of a synthetic scene; `frames` may span several GOPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpecJson {
    pub n_static: usize,
    pub n_dynamic: usize,
    pub motion: MotionJson,
    pub frames: usize,
    pub cameras: usize,
    pub width: usize,
    pub height: usize,
    pub camera_radius: f64,
    pub seed: u64,
}

impl From<&SceneSpec> for SceneSpecJson {
    fn from(s: &SceneSpec) -> Self {
        let motion = match s.motion {
            Motion::RigidTranslation { offset } => MotionJson::RigidTranslation { offset },
            Motion::Rotation { angle } => MotionJson::Rotation { angle },
            Motion::Oscillation { amplitude, cycles } => MotionJson::Oscillation { amplitude, cycles },
            Motion::Multi => MotionJson::Multi,
        };
        Self {
            n_static: s.n_static,
            n_dynamic: s.n_dynamic,
            motion,
            frames: s.gop_length,
            cameras: s.cameras,
            width: s.width,
            height: s.height,
            camera_radius: s.camera_radius,
            seed: s.seed,
        }
    }
}

impl From<&SceneSpecJson> for SceneSpec {
    fn from(s: &SceneSpecJson) -> Self {
        let motion = match s.motion {
            MotionJson::RigidTranslation { offset } => Motion::RigidTranslation { offset },
            MotionJson::Rotation { angle } => Motion::Rotation { angle },
            MotionJson::Oscillation { amplitude, cycles } => Motion::Oscillation { amplitude, cycles },
            MotionJson::Multi => Motion::Multi,
        };
        SceneSpec {
            n_static: s.n_static,
            n_dynamic: s.n_dynamic,
            motion,
            gop_length: s.frames,
            cameras: s.cameras,
            width: s.width,
            height: s.height,
            camera_radius: s.camera_radius,
            seed: s.seed,
        }
    }
}

/// `oscillation` or `multi`, or a path to a spec JSON file.
pub fn load_spec(arg: &str) -> Result<SceneSpec> {
    match arg {
        "oscillation" => Ok(SceneSpec::oscillation()),
        "multi" => Ok(SceneSpec::multi_motion()),
        path => {
            let p = Path::new(path);
            if !p.is_file() {
                return Err(Error::Usage(format!(
                    "unknown scene {path:?}: expected oscillation, multi or a spec file"
                )));
            }
            let text = std::fs::read_to_string(p).at(p)?;
            let spec: SceneSpecJson = serde_json::from_str(&text)?;
            Ok((&spec).into())
        }
    }
}

/// Hex SHA-256 of the canonical spec JSON.
pub fn spec_hash(spec: &SceneSpec) -> String {
    let json = serde_json::to_vec(&SceneSpecJson::from(spec)).expect("spec serializes");
    hex::encode(Sha256::digest(&json))
}

const SCENE_MAGIC: &[u8; 8] = b"STGSSCN1";

/// Deterministic binary form of a generated scene (cameras are rebuilt from the spec).
pub fn scene_bytes(s: &SyntheticScene) -> Vec<u8> {
    let n = s.dynamic.len();
    let mut out = SCENE_MAGIC.to_vec();
    for v in [s.frames.len(), s.cameras.len(), n, s.spec.width, s.spec.height] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let f64s = |out: &mut Vec<u8>, v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    for f in &s.frames {
        for m in [&f.positions, &f.scales, &f.rotations, &f.opacities, &f.colors] {
            f64s(&mut out, &m.data);
        }
    }
    out.extend(s.dynamic.iter().map(|&d| d as u8));
    for row in &s.images {
        for img in row {
            f64s(&mut out, &img.rgb);
        }
    }
    for m in &s.gt_masks {
        out.extend(m.mask.iter().map(|&b| b as u8));
    }
    out
}

pub fn scene_digest(s: &SyntheticScene) -> String {
    hex::encode(Sha256::digest(scene_bytes(s)))
}

pub fn parse_scene_bytes(spec: &SceneSpec, bytes: &[u8]) -> Result<SyntheticScene> {
    let bad = || Error::Usage("cached scene is corrupt".into());
    if bytes.len() < 28 || &bytes[..8] != SCENE_MAGIC {
        return Err(bad());
    }
    let mut pos = 8;
    let mut u32s = [0usize; 5];
    for v in u32s.iter_mut() {
        *v = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
    }
    let [frames, cams, n, w, h] = u32s;
    if (frames, cams, w, h) != (spec.gop_length, spec.cameras, spec.width, spec.height) {
        return Err(bad());
    }
    let mut take = |len: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + len).ok_or_else(bad)?;
        pos += len;
        Ok(s)
    };
    fn f64s(b: &[u8]) -> Vec<f64> {
        b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    }
    let mut out_frames = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut g = GaussianSet::zeros(n);
        for m in [&mut g.positions, &mut g.scales, &mut g.rotations, &mut g.opacities, &mut g.colors] {
            *m = Mat::from_vec(n, m.cols, f64s(take(n * m.cols * 8)?))?;
        }
        out_frames.push(g);
    }
    let dynamic = take(n)?.iter().map(|&b| b != 0).collect();
    let mut images = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut row = Vec::with_capacity(cams);
        for _ in 0..cams {
            row.push(RenderedImage::from_rgb(w, h, f64s(take(w * h * 24)?))?);
        }
        images.push(row);
    }
    let mut gt_masks = Vec::with_capacity(cams);
    for _ in 0..cams {
        let mut m = DynamicMask::all(w, h, false);
        for (d, &b) in m.mask.iter_mut().zip(take(w * h)?) {
            *d = b != 0;
        }
        gt_masks.push(m);
    }
    if pos != bytes.len() {
        return Err(bad());
    }
    Ok(SyntheticScene {
        spec: *spec,
        frames: out_frames,
        dynamic,
        cameras: synth::camera_ring(spec.cameras, spec.camera_radius, w, h)?,
        images,
        gt_masks,
    })
}

/// Generated scenes stored under `root/<spec hash>/`.
#[derive(Clone, Debug)]
pub struct SceneCache {
    pub root: PathBuf,
}

impl SceneCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dir_for(&self, spec: &SceneSpec) -> PathBuf {
        self.root.join(spec_hash(spec))
    }

    /// Load a cached scene or generate and store it; the flag is `true` on a cache hit.
    pub fn load_or_generate(&self, spec: &SceneSpec) -> Result<(SyntheticScene, bool)> {
        let dir = self.dir_for(spec);
        let data = dir.join("scene.bin");
        if let Ok(bytes) = std::fs::read(&data) {
            if let Ok(scene) = parse_scene_bytes(spec, &bytes) {
                return Ok((scene, true));
            }
        }
        let scene = synth::generate(spec)?;
        std::fs::create_dir_all(&dir).at(&dir)?;
        let p = dir.join("spec.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&SceneSpecJson::from(spec))?).at(&p)?;
        let tmp = dir.join("scene.bin.tmp");
        std::fs::write(&tmp, scene_bytes(&scene)).at(&tmp)?;
        std::fs::rename(&tmp, &data).at(&data)?;
        Ok((scene, false))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    pub intrinsics: Mat3,
    /// Row-major world-to-camera transform (OpenCV axes: x right, y down, z forward).
    pub world_to_camera: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

impl From<&CameraModel> for CameraJson {
    fn from(c: &CameraModel) -> Self {
        Self {
            intrinsics: c.intrinsics,
            world_to_camera: c.world_to_camera,
            width: c.width,
            height: c.height,
        }
    }
}

impl CameraJson {
    pub fn model(&self) -> Result<CameraModel> {
        Ok(CameraModel::new(self.intrinsics, self.world_to_camera, self.width, self.height)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    pub center: Vec3,
    pub radius: f64,
}

/// `scene.json` of a trained model directory or an encoded scene directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: String,
    pub spec: SceneSpecJson,
    pub gop_count: usize,
    pub gop_length: usize,
    pub window: usize,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<CameraJson>,
    pub eval_cameras: Vec<usize>,
    pub orbit: Orbit,
    /// QP levels present (encoded scene directories only).
    #[serde(default)]
    pub qps: Vec<u32>,
}

pub const META_FILE: &str = "scene.json";

impl SceneMeta {
    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(META_FILE);
        Ok(serde_json::from_slice(&std::fs::read(&p).at(&p)?)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join(META_FILE);
        std::fs::write(&p, serde_json::to_vec_pretty(self)?).at(&p)
    }

    pub fn camera_models(&self) -> Result<Vec<CameraModel>> {
        self.cameras.iter().map(CameraJson::model).collect()
    }
}

/// Camera on a sphere around `center`: `theta` is the azimuth in the ground
/// plane, `phi` the elevation (radians); looks at the centre with world −y up.
pub fn orbit_camera(theta: f64, phi: f64, radius: f64, center: Vec3, base: &CameraJson) -> Result<CameraModel> {
    if !(radius > 0.0) || !theta.is_finite() || !phi.is_finite() {
        return Err(Error::Usage("orbit radius must be positive and angles finite".into()));
    }
    let eye = [
        center[0] + radius * phi.cos() * theta.cos(),
        center[1] - radius * phi.sin(),
        center[2] + radius * phi.cos() * theta.sin(),
    ];
    Ok(CameraModel::look_at(eye, center, [0.0, -1.0, 0.0], base.intrinsics, base.width, base.height)?)
}

/// Parse a pose: 16 comma-separated floats (row-major world-to-camera) or
/// `theta,phi,radius` around the scene orbit. Intrinsics come from `base`.
pub fn parse_pose(text: &str, base: &CameraJson, orbit: &Orbit) -> std::result::Result<CameraModel, String> {
    let values = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format!("pose must be comma-separated numbers: {e}"))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err("pose values must be finite".into());
    }
    match values.len() {
        16 => {
            let mut m = [[0.0; 4]; 4];
            for (k, v) in values.iter().enumerate() {
                m[k / 4][k % 4] = *v;
            }
            if m[3] != [0.0, 0.0, 0.0, 1.0] {
                return Err("last row of the world-to-camera matrix must be 0,0,0,1".into());
            }
            CameraModel::new(base.intrinsics, m, base.width, base.height).map_err(|e| e.to_string())
        }
        3 => orbit_camera(values[0], values[1], values[2], orbit.center, base).map_err(|e| e.to_string()),
        n => Err(format!("pose needs 16 matrix entries or theta,phi,radius; got {n} values")),
    }
}
