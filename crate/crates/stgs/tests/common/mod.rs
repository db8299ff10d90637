#![allow(dead_code)]

use std::path::{Path, PathBuf};

use stgs::core::synth::{Motion, SceneSpec};
use stgs::core::train::TrainConfig;
use stgs::encode::{encode_scene, DEFAULT_QPS};
use stgs::manifest::StreamManifest;
use stgs::train::{run, TrainJob};

pub const GOPS: usize = 3;
pub const GOP_LENGTH: usize = 4;

pub fn tiny_spec() -> SceneSpec {
    SceneSpec {
        n_static: 40,
        n_dynamic: 20,
        motion: Motion::Oscillation {
            amplitude: [0.3, 0.0, 0.0],
            cycles: 1.0,
        },
        gop_length: GOPS * GOP_LENGTH,
        cameras: 4,
        width: 24,
        height: 24,
        camera_radius: 3.0,
        seed: 5,
    }
}

/// Briefly trained and encoded tiny scene: `(model_dir, stream_dir, manifest)`.
pub struct Fixture {
    _root: tempfile::TempDir,
    pub model_dir: PathBuf,
    pub stream_dir: PathBuf,
    pub manifest: StreamManifest,
}

pub fn train_tiny(out: &Path, iterations: usize) {
    let mut config = TrainConfig::desk(GOP_LENGTH, iterations);
    config.aux_batch = 8;
    let job = TrainJob {
        spec: tiny_spec(),
        gop_count: GOPS,
        config,
        points: 120,
        fps: 30.0,
        out_dir: out.to_path_buf(),
        cache: None,
    };
    run(&job, &mut |_, _| {}).expect("train");
}

pub fn fixture() -> Fixture {
    let root = tempfile::tempdir().unwrap();
    let model_dir = root.path().join("model");
    let stream_dir = root.path().join("stream");
    train_tiny(&model_dir, 20);
    let (manifest, _) = encode_scene(&model_dir, &stream_dir, &DEFAULT_QPS, None).expect("encode");
    Fixture {
        _root: root,
        model_dir,
        stream_dir,
        manifest,
    }
}
