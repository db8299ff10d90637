mod common;

use std::path::Path;
use std::process::{Command, Output};

use stgs::core::segment::Segment;
use stgs::manifest::segment_file;
use stgs::scene::SceneSpecJson;

fn stgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stgs")).args(args).output().expect("run stgs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&stgs(&[])), 2);
    assert_eq!(code(&stgs(&["encode"])), 2);
    assert_eq!(code(&stgs(&["render", "--frame", "0"])), 2);
    assert_eq!(code(&stgs(&["encode", "--model", "m", "--out", "o", "--codec-encoder", "cat"])), 2);
    assert_eq!(code(&stgs(&["train", "--out", "/nonexistent", "--scene", "no-such-scene"])), 2);
    assert_eq!(code(&stgs(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.stgs");
    let out = stgs(&["decode", s(&missing)]);
    assert_eq!(code(&out), 3);
    assert!(!out.stderr.is_empty());

    let junk = dir.path().join("junk.stgs");
    std::fs::write(&junk, b"STGS1 but not really").unwrap();
    assert_eq!(code(&stgs(&["decode", s(&junk)])), 3);

    assert_eq!(code(&stgs(&["play", "--url", "http://127.0.0.1:1/manifest"])), 3);
    assert_eq!(code(&stgs(&["serve", "--scene", s(dir.path()), "--bind", "127.0.0.1:0"])), 3);
}

#[test]
fn gradcheck_prints_table() {
    let out = stgs(&["gradcheck", "--entries", "4", "--gaussians", "6"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("group,"));
    assert!(lines.count() >= 10);
}

#[test]
fn train_encode_decode_render() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec_path = root.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_vec(&SceneSpecJson::from(&common::tiny_spec())).unwrap()).unwrap();
    let model = root.join("model");
    let cache = root.join("cache");
    let train = stgs(&[
        "train", "--scene", s(&spec_path), "--gops", "2", "--gop-length", "4", "--iterations", "6",
        "--points", "80", "--aux-batch", "8", "--out", s(&model), "--cache", s(&cache),
    ]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    for f in ["scene.json", "metrics.jsonl", "gop_0000.stgs", "gop_0001.raw"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(model.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["gop", "iteration", "stage", "losses", "lr", "gaussians", "total"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 1);

    let stream = root.join("stream");
    let enc = stgs(&[
        "encode", "--model", s(&model), "--out", s(&stream), "--qp", "20,28",
        "--codec-encoder", "sh -c cat sh", "--codec-decoder", "sh -c cat sh", "--codec-name", "passthrough",
    ]);
    assert_eq!(code(&enc), 0, "{}", String::from_utf8_lossy(&enc.stderr));
    let seg = segment_file(&stream, 1, 28);
    let bytes = std::fs::read(&seg).unwrap();
    let parsed = Segment::parse(&bytes).unwrap();
    assert_eq!(parsed.header.codec_name, "passthrough");
    assert_eq!(parsed.header.qp, 28);

    let raw_out = root.join("model.raw");
    let dec = stgs(&[
        "decode", s(&seg), "--out", s(&raw_out),
        "--codec-encoder", "sh -c cat sh", "--codec-decoder", "sh -c cat sh",
    ]);
    assert_eq!(code(&dec), 0, "{}", String::from_utf8_lossy(&dec.stderr));
    let header: serde_json::Value = serde_json::from_slice(&dec.stdout).unwrap();
    assert_eq!(header["gop_length"], 4);
    assert_eq!(header["qp"], 28);
    assert!(raw_out.exists());

    // The internal path refuses a segment that needs the external codec.
    assert_eq!(code(&stgs(&["decode", s(&seg)])), 3);

    let png = root.join("frame.png");
    let raw = root.join("frame.raw");
    let render = stgs(&[
        "render", "--segment", s(&segment_file(&stream, 0, 20)), "--meta", s(&stream),
        "--frame", "2", "--pose", "0.3,-0.1,3", "--out", s(&png), "--raw", s(&raw),
        "--codec-encoder", "sh -c cat sh", "--codec-decoder", "sh -c cat sh",
    ]);
    assert_eq!(code(&render), 0, "{}", String::from_utf8_lossy(&render.stderr));
    let img = stgs::imageio::read_png(&png).unwrap();
    assert_eq!((img.width, img.height), (24, 24));
    assert_eq!(std::fs::metadata(&raw).unwrap().len(), 24 * 24 * 3 * 4);

    let bad_frame = stgs(&[
        "render", "--scene", s(&stream), "--qp", "20", "--frame", "9", "--out", s(&png),
        "--codec-encoder", "sh -c cat sh", "--codec-decoder", "sh -c cat sh",
    ]);
    assert_eq!(code(&bad_frame), 2);
}
