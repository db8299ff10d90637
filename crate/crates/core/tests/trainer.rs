use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use stgs_core::synth::{generate, Motion, SceneSpec};
use stgs_core::train::{train_gop, train_gop_with, TrainConfig, TrainData};

fn tiny_scene(motion: Motion, frames: usize) -> SceneSpec {
    SceneSpec {
        n_static: 30,
        n_dynamic: 10,
        motion,
        gop_length: frames,
        cameras: 4,
        width: 24,
        height: 24,
        ..SceneSpec::oscillation()
    }
}

fn tiny_config(frames: usize, iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk(frames, iterations);
    cfg.aux_batch = 8;
    cfg
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let scene = generate(&tiny_scene(Motion::Rotation { angle: 0.5 }, 4)).unwrap();
    let data = TrainData::from_scene(&scene, 60, 3);
    let cfg = tiny_config(4, 40);
    let a = train_gop(&data, &cfg).unwrap();
    let b = train_gop(&data, &cfg).unwrap();
    assert_eq!(a.metrics.len(), b.metrics.len());
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(x.total.to_bits(), y.total.to_bits(), "iteration {}", x.iteration);
    }
    assert_eq!(a.trainable.model.gaussians, b.trainable.model.gaussians);
    assert_eq!(a.eval_psnr.to_bits(), b.eval_psnr.to_bits());
}

#[test]
fn gaussian_budget_is_never_exceeded() {
    let scene = generate(&tiny_scene(Motion::Multi, 4)).unwrap();
    let data = TrainData::from_scene(&scene, 40, 1);
    let mut cfg = tiny_config(4, 80);
    cfg.max_gaussians = 48;
    cfg.grad_threshold = 0.0;
    let mut peak = 0;
    let mut saw_cap = false;
    train_gop_with(&data, &cfg, &mut |m| {
        peak = peak.max(m.gaussians);
        if let Some(d) = m.density {
            saw_cap |= d.before == cfg.max_gaussians;
            if d.before == cfg.max_gaussians {
                assert_eq!(d.after, d.before);
            }
        }
    })
    .unwrap();
    assert!(peak <= 48, "{peak}");
    assert!(saw_cap);
}

#[test]
fn held_out_psnr_rises_early_in_training() {
    let spec = SceneSpec {
        motion: Motion::RigidTranslation { offset: [0.3, 0.0, 0.0] },
        ..SceneSpec::oscillation()
    };
    let scene = generate(&spec).unwrap();
    let data = TrainData::from_scene(&scene, 300, 0);
    let mut cfg = TrainConfig::desk(spec.gop_length, 500);
    cfg.eval_interval = 100;
    let mut trace = Vec::new();
    train_gop_with(&data, &cfg, &mut |m| trace.extend(m.eval_psnr)).unwrap();
    assert_eq!(trace.len(), 5);
    assert!(trace.windows(2).all(|w| w[1] > w[0]), "{trace:?}");
}

/// `crate::<module>` references made by a source file.
fn crate_refs(src: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (i, _) in src.match_indices("crate::") {
        let rest = &src[i + 7..];
        if rest.starts_with('{') {
            let group = &rest[1..rest.find('}').unwrap()];
            for item in group.split(',') {
                let name: String = item.trim().chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
                if !name.is_empty() {
                    out.insert(name);
                }
            }
        } else {
            out.insert(rest.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect());
        }
    }
    out
}

fn module_sources(src: &Path) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for entry in std::fs::read_dir(src).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_stem().unwrap().to_str().unwrap().to_string();
        let text = if p.is_dir() {
            let mut all = String::new();
            for f in std::fs::read_dir(&p).unwrap() {
                all.push_str(&std::fs::read_to_string(f.unwrap().path()).unwrap());
            }
            all
        } else {
            std::fs::read_to_string(&p).unwrap()
        };
        // Unit tests may use anything.
        let text = match text.find("#[cfg(test)]") {
            Some(i) => text[..i].to_string(),
            None => text,
        };
        map.insert(name, text);
    }
    map
}

#[test]
fn inference_path_does_not_reach_the_transformer() {
    let sources = module_sources(&Path::new(env!("CARGO_MANIFEST_DIR")).join("src"));
    let mut reached = BTreeSet::new();
    let mut stack = vec!["pipeline".to_string(), "segment".to_string()];
    while let Some(m) = stack.pop() {
        if !reached.insert(m.clone()) {
            continue;
        }
        let src = sources.get(&m).unwrap_or_else(|| panic!("no module {m}"));
        assert!(!src.contains("TransformerAux") && !src.contains("transformer"), "{m} mentions the transformer");
        for r in crate_refs(src) {
            if sources.contains_key(&r) {
                stack.push(r);
            }
        }
    }
    assert!(reached.contains("render") && reached.contains("gaussian"));
    assert!(!reached.contains("train"), "{reached:?}");
}
