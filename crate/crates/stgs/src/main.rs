use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stgs::codec::{CodecCommand, SubprocessCodec};
use stgs::error::{Error, Result};
use stgs::scene::{load_spec, parse_pose, SceneCache, SceneMeta};
use stgs::{bench, checkpoint, client, encode, imageio, manifest, server, train};
use stgs_core::pipeline;
use stgs_core::segment::{decode_gop_with, ExternalCodec, Segment};
use stgs_core::train::gradcheck::{grad_check, GradCheckConfig};
use stgs_core::train::TrainConfig;

#[derive(Parser)]
#[command(name = "stgs", version, about = "Train, encode, stream and inspect Gaussian-grid video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every GOP of a synthetic scene and write checkpoints.
    Train(TrainArgs),
    /// Encode checkpoints into a scene directory with a QP ladder.
    Encode(EncodeArgs),
    /// Decode one segment and print its header.
    Decode(DecodeArgs),
    /// Render one frame to PNG.
    Render(RenderArgs),
    /// Serve an encoded scene over HTTP.
    Serve(ServeArgs),
    /// Stream a scene from a server and write a playback report.
    Play(PlayArgs),
    /// Size, quality and timing per GOP and QP as CSV.
    Bench(BenchArgs),
    /// Finite-difference check of every gradient group.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// `oscillation`, `multi` or a scene spec JSON file.
    #[arg(long, default_value = "oscillation")]
    scene: String,
    #[arg(long, default_value_t = 1)]
    gops: usize,
    #[arg(long, default_value_t = 20)]
    gop_length: usize,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long)]
    out: PathBuf,
    /// Directory of cached generated scenes.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    points: usize,
    #[arg(long)]
    max_gaussians: Option<usize>,
    #[arg(long)]
    aux_batch: Option<usize>,
    #[arg(long)]
    no_aux: bool,
    #[arg(long)]
    no_temporal: bool,
    #[arg(long)]
    no_relocation: bool,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Held-out PSNR every this many iterations (0: only at the end).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
}

#[derive(Args)]
struct CodecArgs {
    /// External feature-video encoder command (see the README for the contract).
    #[arg(long, requires = "codec_decoder")]
    codec_encoder: Option<String>,
    #[arg(long, requires = "codec_encoder")]
    codec_decoder: Option<String>,
    #[arg(long, default_value = "external")]
    codec_name: String,
}

impl CodecArgs {
    fn codec(&self) -> Result<Option<SubprocessCodec>> {
        match (&self.codec_encoder, &self.codec_decoder) {
            (Some(e), Some(d)) => {
                let parse = |s: &str| CodecCommand::parse(s).ok_or_else(|| Error::Usage("empty codec command".into()));
                Ok(Some(SubprocessCodec {
                    name: self.codec_name.clone(),
                    encoder: parse(e)?,
                    decoder: parse(d)?,
                }))
            }
            _ => Ok(None),
        }
    }
}

#[derive(Args)]
struct EncodeArgs {
    /// Directory written by `stgs train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = encode::DEFAULT_QPS)]
    qp: Vec<u32>,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Args)]
struct DecodeArgs {
    segment: PathBuf,
    /// Write the decoded model as a raw checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Args)]
struct RenderArgs {
    /// Encoded scene directory (with --gop and --qp) ...
    #[arg(long, conflicts_with = "segment")]
    scene: Option<PathBuf>,
    /// ... or a single segment file (cameras from --meta).
    #[arg(long)]
    segment: Option<PathBuf>,
    /// Directory holding scene.json when rendering a bare segment.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    gop: usize,
    #[arg(long)]
    qp: Option<u32>,
    #[arg(long)]
    frame: usize,
    /// 16 comma-separated floats (world-to-camera, row-major) or theta,phi,radius.
    #[arg(long, allow_hyphen_values = true)]
    pose: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the float image as planar f32.
    #[arg(long)]
    raw: Option<PathBuf>,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long)]
    throttle_bytes_per_sec: Option<f64>,
    /// Static files served under /viewer/.
    #[arg(long)]
    viewer: Option<PathBuf>,
}

#[derive(Args)]
struct PlayArgs {
    #[arg(long)]
    url: String,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    gops: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pose: Option<String>,
    /// Pin the QP instead of adapting.
    #[arg(long)]
    qp: Option<u32>,
    /// Decode as fast as possible instead of in real time.
    #[arg(long)]
    no_pace: bool,
    /// Compare against the server's /render.
    #[arg(long)]
    reference: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = encode::DEFAULT_QPS)]
    qp: Vec<u32>,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// CSV output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Entries checked per parameter matrix (all when omitted).
    #[arg(long)]
    entries: Option<usize>,
    #[arg(long, default_value_t = 16)]
    gaussians: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    if a.gops == 0 || a.gop_length == 0 {
        return Err(Error::Usage("--gops and --gop-length must be positive".into()));
    }
    let mut spec = load_spec(&a.scene)?;
    spec.gop_length = a.gops * a.gop_length;
    let mut cfg = TrainConfig::desk(a.gop_length, a.iterations);
    cfg.seed = a.seed;
    cfg.aux = !a.no_aux;
    cfg.temporal_reg = !a.no_temporal;
    cfg.relocation = !a.no_relocation;
    cfg.eval_interval = a.eval_every;
    if let Some(m) = a.max_gaussians {
        cfg.max_gaussians = m;
    }
    if let Some(b) = a.aux_batch {
        cfg.aux_batch = b;
    }
    let job = train::TrainJob {
        spec,
        gop_count: a.gops,
        config: cfg,
        points: a.points,
        fps: a.fps,
        out_dir: a.out.clone(),
        cache: a.cache.map(SceneCache::new),
    };
    let summary = train::run(&job, &mut |gop, m| {
        if let Some(p) = m.eval_psnr {
            eprintln!("gop {gop} iteration {} gaussians {} loss {:.5} held-out {p:.2} dB", m.iteration, m.gaussians, m.total);
        }
    })?;
    for s in &summary {
        println!("{}", serde_json::to_string(s)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_encode(a: EncodeArgs) -> Result<ExitCode> {
    let codec = a.codec.codec()?;
    let (m, rows) = encode::encode_scene(&a.model, &a.out, &a.qp, codec.as_ref().map(|c| c as &dyn ExternalCodec))?;
    for r in &rows {
        println!("{}", serde_json::to_string(r)?);
    }
    eprintln!("{} GOPs x {} QPs, version {}", m.gop_count, m.qp_ladder.len(), m.version);
    Ok(ExitCode::SUCCESS)
}

fn cmd_decode(a: DecodeArgs) -> Result<ExitCode> {
    let bytes = std::fs::read(&a.segment).map_err(|source| Error::Io {
        path: a.segment.clone(),
        source,
    })?;
    let codec = a.codec.codec()?;
    let sizes = Segment::parse(&bytes)?.sizes();
    let d = decode_gop_with(&bytes, codec.as_ref().map(|c| c as &dyn ExternalCodec))?;
    let h = &d.header;
    let info = serde_json::json!({
        "version": h.version, "gop_length": h.gop_length, "window": h.window,
        "feature_dim": h.feature_dim, "gaussians": h.count, "side": h.side,
        "pad_count": h.pad_count, "qp": h.qp, "time_bands": h.time_bands,
        "codec": format!("{:?}", h.codec), "codec_name": h.codec_name,
        "ranges": h.ranges, "bytes": sizes.total, "video_bytes": sizes.video,
        "weight_bytes": sizes.weights, "attribute_bytes": sizes.attributes,
    });
    println!("{}", serde_json::to_string_pretty(&info)?);
    if let Some(out) = a.out {
        std::fs::write(&out, checkpoint::encode_raw_model(&d.model)).map_err(|source| Error::Io { path: out, source })?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_render(a: RenderArgs) -> Result<ExitCode> {
    let (bytes, meta) = match (&a.scene, &a.segment) {
        (Some(dir), _) => {
            let m = manifest::build_manifest(dir)?;
            let qp = a.qp.unwrap_or(m.qp_ladder[0].qp);
            if a.gop >= m.gop_count || m.level(qp).is_none() {
                return Err(Error::Usage(format!("no segment for gop {}, qp {qp}", a.gop)));
            }
            let p = manifest::segment_file(dir, a.gop, qp);
            (std::fs::read(&p).map_err(|source| Error::Io { path: p, source })?, SceneMeta::read(dir)?)
        }
        (None, Some(seg)) => {
            let meta_dir = a.meta.clone().ok_or_else(|| Error::Usage("--segment needs --meta DIR for cameras".into()))?;
            (
                std::fs::read(seg).map_err(|source| Error::Io {
                    path: seg.clone(),
                    source,
                })?,
                SceneMeta::read(&meta_dir)?,
            )
        }
        (None, None) => return Err(Error::Usage("give --scene or --segment".into())),
    };
    let codec = a.codec.codec()?;
    let model = decode_gop_with(&bytes, codec.as_ref().map(|c| c as &dyn ExternalCodec))?.model;
    if a.frame >= model.features.gop_length {
        return Err(Error::Usage(format!("frame {} outside 0..{}", a.frame, model.features.gop_length)));
    }
    let cam = match &a.pose {
        Some(p) => parse_pose(p, &meta.cameras[0], &meta.orbit).map_err(Error::Usage)?,
        None => meta.cameras.last().ok_or_else(|| Error::Usage("scene has no cameras".into()))?.model()?,
    };
    let img = pipeline::render_frame(&model, a.frame, &cam)?;
    imageio::write_png(&a.out, &img)?;
    if let Some(raw) = a.raw {
        std::fs::write(&raw, imageio::encode_raw(&img)).map_err(|source| Error::Io { path: raw, source })?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(a: ServeArgs) -> Result<ExitCode> {
    let cfg = server::ServerConfig {
        scene_dir: a.scene,
        bind: a.bind,
        throttle_bytes_per_sec: a.throttle_bytes_per_sec,
        viewer_dir: a.viewer,
    };
    server::serve_forever(&cfg, |addr| eprintln!("serving on http://{addr}"))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_play(a: PlayArgs) -> Result<ExitCode> {
    let mut cfg = client::PlayConfig::new(a.url);
    cfg.gops = a.gops;
    cfg.pose = a.pose;
    cfg.pin_qp = a.qp;
    cfg.pace = !a.no_pace;
    cfg.reference = a.reference;
    let report = client::play(&cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    match a.report {
        Some(p) => std::fs::write(&p, json).map_err(|source| Error::Io { path: p, source })?,
        None => println!("{json}"),
    }
    eprintln!("QP trace {:?}, stalls {}, first frame after {:.1} ms", report.qp_trace, report.total_stalls, report.ttff_ms);
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    let cache = a.cache.map(SceneCache::new);
    let rows = bench::bench(&a.model, &a.qp, cache.as_ref())?;
    let csv = bench::to_csv(&rows);
    match a.out {
        Some(p) => std::fs::write(&p, csv).map_err(|source| Error::Io { path: p, source })?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = GradCheckConfig {
        gaussians: a.gaussians,
        max_entries: a.entries,
        seed: a.seed,
        ..Default::default()
    };
    let report = grad_check(&cfg)?;
    println!("group,entries,max_abs_diff,max_grad,rel_error");
    for g in &report.groups {
        println!("{},{},{:.3e},{:.3e},{:.3e}", g.group.name(), g.entries, g.max_abs_diff, g.max_grad, g.rel_error);
    }
    let ok = report.passed();
    eprintln!("worst relative error {:.3e} (tolerance {:.0e}): {}", report.worst(), report.tolerance, if ok { "pass" } else { "FAIL" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Render(a) => cmd_render(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Play(a) => cmd_play(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
