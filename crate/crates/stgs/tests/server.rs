mod common;

use std::sync::OnceLock;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use stgs::client::{play, time_to_first_frame, Http, PlayConfig};
use stgs::core::pipeline;
use stgs::core::segment::decode_gop;
use stgs::imageio::decode_png;
use stgs::manifest::{build_manifest, segment_file};
use stgs::server::{spawn, ServerConfig, ServerHandle, VERSION_HEADER};

fn shared() -> &'static common::Fixture {
    static F: OnceLock<common::Fixture> = OnceLock::new();
    F.get_or_init(common::fixture)
}

fn server() -> ServerHandle {
    spawn(&ServerConfig {
        scene_dir: shared().stream_dir.clone(),
        bind: "127.0.0.1:0".parse().unwrap(),
        throttle_bytes_per_sec: None,
        viewer_dir: None,
    })
    .unwrap()
}

fn version_of(resp: &reqwest::blocking::Response) -> String {
    resp.headers()[VERSION_HEADER].to_str().unwrap().to_string()
}

#[test]
fn manifest_describes_stream() {
    let f = shared();
    let s = server();
    let resp = Client::new().get(format!("{}/manifest", s.url())).send().unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(version_of(&resp), f.manifest.version);
    let m: stgs::manifest::StreamManifest = serde_json::from_slice(&resp.bytes().unwrap()).unwrap();
    assert_eq!(m, f.manifest);
    assert_eq!(m.gop_count, common::GOPS);
    assert_eq!(m.gop_length, common::GOP_LENGTH);
    assert_eq!(m.qp_ladder.iter().map(|l| l.qp).collect::<Vec<_>>(), vec![16, 20, 24, 28, 32]);
    for pair in m.qp_ladder.windows(2) {
        for g in 0..m.gop_count {
            assert!(pair[1].gop_bytes[g] <= pair[0].gop_bytes[g]);
        }
    }
    assert_eq!(m.segment_uri(2, 24), "/segment/2/24");
    s.shutdown();
}

#[test]
fn segments_match_disk_bytes() {
    let f = shared();
    let s = server();
    let http = Http::new(&format!("{}/manifest", s.url())).unwrap();
    for g in 0..f.manifest.gop_count {
        for l in &f.manifest.qp_ladder {
            let body = http.get(&f.manifest.segment_uri(g, l.qp)).unwrap();
            let disk = std::fs::read(segment_file(&f.stream_dir, g, l.qp)).unwrap();
            assert_eq!(body, disk);
            assert_eq!(body.len() as u64, l.gop_bytes[g]);
        }
    }
    let stats = s.stats();
    assert_eq!(stats.segments_served as usize, f.manifest.gop_count * f.manifest.qp_ladder.len());
    assert_eq!(stats.segment_requests["1/20"], 1);
    s.shutdown();
}

#[test]
fn conditional_and_range_requests() {
    let f = shared();
    let s = server();
    let c = Client::new();
    let url = format!("{}/segment/0/16", s.url());
    let disk = std::fs::read(segment_file(&f.stream_dir, 0, 16)).unwrap();

    let full = c.get(&url).send().unwrap();
    let etag = full.headers()["etag"].to_str().unwrap().to_string();
    assert_eq!(full.headers()["accept-ranges"], "bytes");
    assert_eq!(full.bytes().unwrap().as_ref(), &disk[..]);

    let cached = c.get(&url).header("if-none-match", &etag).send().unwrap();
    assert_eq!(cached.status(), StatusCode::NOT_MODIFIED);
    assert_eq!(version_of(&cached), f.manifest.version);

    let part = c.get(&url).header("range", "bytes=10-109").send().unwrap();
    assert_eq!(part.status(), StatusCode::PARTIAL_CONTENT);
    assert_eq!(part.headers()["content-range"].to_str().unwrap(), format!("bytes 10-109/{}", disk.len()));
    assert_eq!(part.bytes().unwrap().as_ref(), &disk[10..110]);

    let tail = c.get(&url).header("range", "bytes=-7").send().unwrap();
    assert_eq!(tail.bytes().unwrap().as_ref(), &disk[disk.len() - 7..]);

    let bad = c.get(&url).header("range", format!("bytes={}-", disk.len())).send().unwrap();
    assert_eq!(bad.status(), StatusCode::RANGE_NOT_SATISFIABLE);
    assert_eq!(bad.headers()["content-range"].to_str().unwrap(), format!("bytes */{}", disk.len()));
    s.shutdown();
}

#[test]
fn unknown_routes_and_bad_render_queries() {
    let f = shared();
    let s = server();
    let c = Client::new();
    let status = |path: &str| {
        let r = c.get(format!("{}{path}", s.url())).send().unwrap();
        assert_eq!(version_of(&r), f.manifest.version, "{path}");
        r.status()
    };
    assert_eq!(status("/segment/9/16"), StatusCode::NOT_FOUND);
    assert_eq!(status("/segment/0/17"), StatusCode::NOT_FOUND);
    assert_eq!(status("/segment/x/16"), StatusCode::NOT_FOUND);
    assert_eq!(status("/nothing"), StatusCode::NOT_FOUND);
    assert_eq!(status("/render?gop=9&frame=0&qp=16"), StatusCode::NOT_FOUND);
    assert_eq!(status("/render?gop=0&frame=0&qp=18"), StatusCode::NOT_FOUND);
    assert_eq!(status("/render?frame=0"), StatusCode::BAD_REQUEST);
    assert_eq!(status("/render?gop=0&frame=4&qp=16"), StatusCode::BAD_REQUEST);
    assert_eq!(status("/render?gop=0&frame=-1"), StatusCode::BAD_REQUEST);
    assert_eq!(status("/render?gop=0&frame=0&pose=1,2"), StatusCode::BAD_REQUEST);
    assert_eq!(status("/render?gop=0&frame=0&pose=a,b,c"), StatusCode::BAD_REQUEST);
    assert_eq!(status("/stats"), StatusCode::OK);
    s.shutdown();
}

#[test]
fn render_matches_local_decode() {
    let f = shared();
    let s = server();
    let c = Client::new();
    let bytes = std::fs::read(segment_file(&f.stream_dir, 1, 24)).unwrap();
    let model = decode_gop(&bytes).unwrap().model;
    let default_cam = f.manifest.cameras.last().unwrap().model().unwrap();
    let orbit_cam = stgs::scene::parse_pose("0.4,0.2,3.0", &f.manifest.cameras[0], &f.manifest.orbit).unwrap();
    for (pose, cam) in [(None, default_cam), (Some("0.4,0.2,3.0"), orbit_cam)] {
        for frame in [0, 3] {
            let mut url = format!("{}/render?gop=1&frame={frame}&qp=24&seq=77", s.url());
            if let Some(p) = pose {
                url.push_str("&pose=");
                url.push_str(p);
            }
            let r = c.get(&url).send().unwrap();
            assert_eq!(r.status(), StatusCode::OK);
            assert_eq!(r.headers()["content-type"], "image/png");
            assert_eq!(r.headers()["x-render-seq"], "77");
            assert!(r.headers()["x-render-ms"].to_str().unwrap().parse::<f64>().unwrap() >= 0.0);
            let server = decode_png(&r.bytes().unwrap()).unwrap();
            let local = pipeline::render_frame(&model, frame, &cam).unwrap();
            for (a, b) in server.rgb.iter().zip(&local.rgb) {
                assert_eq!(*a, (b.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            }
        }
    }
    let stats = s.stats();
    assert_eq!(stats.renders, 4);
    assert_eq!(stats.decodes, 1);
    s.shutdown();
}

#[test]
fn manifest_build_rejects_missing_segment() {
    let f = shared();
    let dir = tempfile::tempdir().unwrap();
    let copy = |from: &std::path::Path, to: &std::path::Path| {
        for entry in walk(from) {
            let rel = entry.strip_prefix(from).unwrap();
            let dest = to.join(rel);
            std::fs::create_dir_all(dest.parent().unwrap()).unwrap();
            std::fs::copy(&entry, dest).unwrap();
        }
    };
    copy(&f.stream_dir, dir.path());
    assert_eq!(build_manifest(dir.path()).unwrap(), f.manifest);
    std::fs::remove_file(segment_file(dir.path(), 2, 20)).unwrap();
    let err = build_manifest(dir.path()).unwrap_err().to_string();
    assert!(err.contains("missing segment for gop 2, qp 20"), "{err}");
    let refused = spawn(&ServerConfig {
        scene_dir: dir.path().to_path_buf(),
        bind: "127.0.0.1:0".parse().unwrap(),
        throttle_bytes_per_sec: None,
        viewer_dir: None,
    });
    assert!(refused.is_err());
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn loopback_playback_has_no_stalls() {
    let s = server();
    let mut cfg = PlayConfig::new(format!("{}/manifest", s.url()));
    cfg.reference = true;
    let report = play(&cfg).unwrap();
    assert_eq!(report.gops.len(), common::GOPS);
    assert_eq!(report.total_stalls, 0);
    assert_eq!(report.qp_trace, vec![16; common::GOPS]);
    assert!(report.ttff_ms > 0.0);
    for g in &report.gops {
        assert!(g.error.is_none(), "{:?}", g.error);
        let psnr = g.psnr_vs_server.unwrap();
        assert!(psnr > 60.0 || psnr.is_infinite(), "gop {} psnr {psnr}", g.gop);
    }
    s.shutdown();
}

#[test]
fn pinned_qp_and_unknown_qp() {
    let s = server();
    let mut cfg = PlayConfig::new(s.url());
    cfg.pin_qp = Some(28);
    cfg.pace = false;
    cfg.render = false;
    let report = play(&cfg).unwrap();
    assert_eq!(report.qp_trace, vec![28; common::GOPS]);
    cfg.pin_qp = Some(27);
    let err = play(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    s.shutdown();
}

#[test]
fn cold_start_fetches_only_its_gop() {
    let f = shared();
    for gop in [0, common::GOPS / 2, common::GOPS - 1] {
        let s = server();
        let http = Http::new(&s.url()).unwrap();
        let r = time_to_first_frame(&http, &f.manifest, gop, 20, None).unwrap();
        assert_eq!(r.gop, gop);
        assert_eq!(r.bytes, f.manifest.level(20).unwrap().gop_bytes[gop]);
        assert!(r.total_ms >= r.download_ms + r.keyframe_ms);
        let stats = s.stats();
        assert_eq!(stats.segment_requests.len(), 1);
        assert_eq!(stats.segment_requests[&format!("{gop}/20")], 1);
        assert_eq!(stats.bytes_served, r.bytes);
        s.shutdown();
    }
}

#[test]
fn throttle_can_change_while_running() {
    let f = shared();
    let s = server();
    let http = Http::new(&s.url()).unwrap();
    let len = f.manifest.level(16).unwrap().gop_bytes[0] as f64;
    let rate = len / 0.5;
    s.set_throttle(Some(rate));
    assert_eq!(s.stats().throttle_bytes_per_sec, Some(rate));
    let t0 = std::time::Instant::now();
    http.get("/segment/0/16").unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let expected = (len - stgs::throttle::CHUNK as f64).max(0.0) / rate;
    assert!(secs >= expected * 0.9, "{secs} < {expected}");
    s.set_throttle(None);
    let t0 = std::time::Instant::now();
    http.get("/segment/0/16").unwrap();
    assert!(t0.elapsed().as_secs_f64() < 0.25);
    s.shutdown();
}
