//! `evtexture` — command-line front end for the event-driven VSR pipeline:
//! simulate, voxelize, synth-data, train, infer, eval, texture-mag,
//! profile, ablate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use evtexture::data::{ingest_clip_dir, synth_clip, write_clip, ClipRecord, SynthConfig, SynthKind};
use evtexture::evaluation::{
    bucket_levels, evaluate_clip, temporal_profile, texture_magnitude, ChannelMode, TEXTURE_ALPHA,
};
use evtexture::events::{normalize_voxel, simulate_events, voxelize, SimulatorConfig};
use evtexture::io;
use evtexture::network::{EvTextureModel, NetworkConfig, UpdaterKind};
use evtexture::nn::ParamStore;
use evtexture::training::{train, TrainConfig};
use evtexture::EvError;

#[derive(Parser)]
#[command(name = "evtexture", version, about = "Event-driven texture-enhanced video super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an event stream from a directory of PNG frames
    Simulate(SimulateArgs),
    /// Convert an event file into a voxel grid container
    Voxelize(VoxelizeArgs),
    /// Generate a synthetic clip in the standard directory layout
    SynthData(SynthArgs),
    /// Train a model from a YAML config
    Train(TrainArgs),
    /// Super-resolve a frame directory with a trained checkpoint
    Infer(InferArgs),
    /// PSNR/SSIM report for prediction vs ground-truth directories
    Eval(EvalArgs),
    /// Texture-magnitude score of a clip
    TextureMag(TextureMagArgs),
    /// Export a temporal profile (one column across time) as PNG
    Profile(ProfileArgs),
    /// Train an ablation variant (Table-5 axes)
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// directory of PNG frames, lexicographic = temporal order
    #[arg(long)]
    frames: PathBuf,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    /// output .evt1 file
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    contrast_std: f64,
}

#[derive(Args)]
struct VoxelizeArgs {
    /// input .evt1 (or .csv with --width/--height)
    #[arg(long)]
    events: PathBuf,
    #[arg(long, default_value_t = 5)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
    /// apply percentile normalization
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    width: Option<u16>,
    #[arg(long)]
    height: Option<u16>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "checkerboard")]
    kind: String,
    #[arg(long, default_value_t = 5)]
    frames: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 1.0)]
    vx: f64,
    #[arg(long, default_value_t = 0.0)]
    vy: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value_t = 5)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

/// YAML training spec: network + schedule + data sources.
#[derive(Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct TrainSpec {
    network: NetworkConfig,
    train: TrainConfig,
    /// synthetic training clips
    synth_train: Vec<SynthConfig>,
    /// synthetic validation clips
    synth_val: Vec<SynthConfig>,
    /// additional training clips in the standard directory layout
    clip_dirs: Vec<PathBuf>,
    /// model init seed
    init_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// override the config's training seed
    #[arg(long)]
    seed: Option<u64>,
    /// override total iterations
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    /// directory of LR PNG frames
    #[arg(long)]
    frames: PathBuf,
    /// event file matching the LR frames (LR or HR sensor resolution)
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// must match the checkpoint's scale
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    #[arg(long)]
    out: PathBuf,
    /// optional HR ground truth for metrics
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value = "Y")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    border: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TextureMagArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// additional clips for corpus-relative difficulty bucketing
    #[arg(long)]
    corpus: Vec<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    column: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// model-a (motion only), model-c (conv updater), model-d (direct),
    /// model-e (no residual), iter3/iter5/iter8 (bin count)
    #[arg(long)]
    variant: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(serde::Serialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    seed: u64,
    version: String,
    timestamp: String,
}

fn write_manifest(dir: &Path, config_json: &str, seed: u64) -> evtexture::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EvError::io(dir, e))?;
    let mut hasher = Sha256::new();
    hasher.update(config_json.as_bytes());
    let manifest = RunManifest {
        command: std::env::args().collect::<Vec<_>>().join(" "),
        config_hash: hex::encode(hasher.finalize()),
        seed,
        version: format!("evtexture {}", env!("CARGO_PKG_VERSION")),
        timestamp: chrono_free_timestamp(),
    };
    let path = dir.join("run_manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| EvError::io(path, e))
}

/// ISO-8601 UTC timestamp from the system clock (seconds resolution).
fn chrono_free_timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    // days since epoch -> civil date (Howard Hinnant's algorithm)
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    let (h, m, s) = (rem / 3600, (rem % 3600) / 60, rem % 60);
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let mo = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if mo <= 2 { y + 1 } else { y };
    format!("{y:04}-{mo:02}-{d:02}T{h:02}:{m:02}:{s:02}Z")
}

fn env_seed() -> u64 {
    std::env::var("EVTEXTURE_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

fn load_spec(path: &Path) -> evtexture::Result<(TrainSpec, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| EvError::io(path, e))?;
    let spec: TrainSpec = serde_yaml::from_str(&text)
        .map_err(|e| EvError::Format { format: "train config YAML", reason: e.to_string() })?;
    Ok((spec, text))
}

fn build_dataset(spec: &TrainSpec) -> evtexture::Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    let mut train_clips = Vec::new();
    for cfg in &spec.synth_train {
        train_clips.push(synth_clip(cfg)?);
    }
    for dir in &spec.clip_dirs {
        train_clips.push(ingest_clip_dir(dir, spec.network.bins)?);
    }
    let mut val_clips = Vec::new();
    for cfg in &spec.synth_val {
        val_clips.push(synth_clip(cfg)?);
    }
    Ok((train_clips, val_clips))
}

fn run_training(
    spec: &TrainSpec,
    spec_text: &str,
    out: &Path,
) -> evtexture::Result<()> {
    spec.network.validate()?;
    spec.train.validate()?;
    write_manifest(out, spec_text, spec.train.seed)?;
    let (train_clips, val_clips) = build_dataset(spec)?;
    let mut store = ParamStore::<f32>::new();
    let model = EvTextureModel::build(&mut store, &spec.network, spec.init_seed)?;
    let outcome = train(&model, &mut store, &train_clips, &val_clips, &spec.train, Some(out))?;
    println!(
        "trained {} iters, final loss {:.6}",
        outcome.log.len(),
        outcome.final_loss
    );
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> evtexture::Result<()> {
    let frames = io::load_frame_dir(&a.frames, a.fps)?;
    let cfg = SimulatorConfig {
        contrast_std: a.contrast_std,
        rng_seed: a.seed.unwrap_or_else(env_seed),
        ..Default::default()
    };
    let stream = simulate_events(&frames, &cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_manifest(dir, &serde_json::to_string(&cfg).unwrap(), cfg.rng_seed)?;
    }
    io::write_evt1(&a.out, &stream)?;
    println!("{} events -> {}", stream.len(), a.out.display());
    Ok(())
}

fn cmd_voxelize(a: VoxelizeArgs) -> evtexture::Result<()> {
    let stream = match a.events.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let (w, h) = a.width.zip(a.height).ok_or_else(|| {
                EvError::invalid("--width and --height are required for CSV input")
            })?;
            io::read_events_csv(&a.events, w, h)?
        }
        _ => io::read_evt1(&a.events)?,
    };
    let mut grid = voxelize(&stream, a.bins)?;
    if a.normalize {
        grid = normalize_voxel(&grid)?;
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_manifest(dir, &format!("bins={} normalize={}", a.bins, a.normalize), 0)?;
    }
    io::write_voxel(&a.out, &grid)?;
    println!("voxel grid {:?} -> {}", grid.bins.dim(), a.out.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> evtexture::Result<()> {
    let cfg = SynthConfig {
        kind: a.kind.parse::<SynthKind>()?,
        frames: a.frames,
        height: a.height,
        width: a.width,
        velocity: (a.vx, a.vy),
        seed: a.seed.unwrap_or_else(env_seed),
        scale: a.scale,
        bins: a.bins,
        ..Default::default()
    };
    let clip = synth_clip(&cfg)?;
    write_manifest(&a.out, &serde_json::to_string(&cfg).unwrap(), cfg.seed)?;
    write_clip(&a.out, &clip, cfg.scale)?;
    println!(
        "clip {} (texture magnitude {:.3}) -> {}",
        clip.name,
        clip.texture_magnitude,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> evtexture::Result<()> {
    let (mut spec, text) = load_spec(&a.config)?;
    if let Some(seed) = a.seed {
        spec.train.seed = seed;
    } else if std::env::var("EVTEXTURE_SEED").is_ok() {
        spec.train.seed = env_seed();
    }
    if let Some(iters) = a.iters {
        spec.train.total_iters = iters;
    }
    run_training(&spec, &text, &a.out)
}

fn cmd_infer(a: InferArgs) -> evtexture::Result<()> {
    let ckpt = io::load_checkpoint(&a.ckpt)?;
    if let Some(scale) = a.scale {
        if scale != ckpt.config.scale {
            return Err(EvError::invalid(format!(
                "--scale {scale} does not match the checkpoint scale {}",
                ckpt.config.scale
            )));
        }
    }
    let cfg = ckpt.config.clone();
    let mut store = ParamStore::<f32>::new();
    let model = EvTextureModel::build(&mut store, &cfg, 0)?;
    io::load_into_store(&ckpt, &mut store)?;

    let frames = io::load_frame_dir(&a.frames, a.fps)?;
    let (_, lh, lw) = frames.frame_dim();
    let stream = io::read_evt1(&a.events)?;
    let timestamps: Vec<f64> = (0..frames.len()).map(|t| frames.timestamp(t)).collect();
    let intervals = evtexture::data::split_events(&stream, &timestamps)?;
    let voxels = intervals
        .iter()
        .map(|s| {
            let grid = voxelize(s, cfg.bins)?;
            let grid = if (s.width as usize, s.height as usize) == (lw * cfg.scale, lh * cfg.scale)
            {
                evtexture::events::downsample_voxel(&grid, cfg.scale)?
            } else if (s.width as usize, s.height as usize) == (lw, lh) {
                grid
            } else {
                return Err(EvError::invalid(format!(
                    "event resolution {}x{} matches neither the frames nor scale x frames",
                    s.width, s.height
                )));
            };
            normalize_voxel(&grid)
        })
        .collect::<evtexture::Result<Vec<_>>>()?;

    write_manifest(&a.out, &serde_json::to_string(&cfg).unwrap(), 0)?;
    let out_frames = model.forward_sequence(&store, &frames, &voxels)?;
    let clipped = evtexture::imageops::FrameSequence::new(
        out_frames.frames.iter().map(|f| f.mapv(|v| v.clamp(0.0, 1.0))).collect(),
        out_frames.fps,
    )?;
    io::save_frame_dir(&a.out, &clipped)?;

    let metrics = if let Some(gt_dir) = &a.gt {
        let gt = io::load_frame_dir(gt_dir, a.fps)?;
        serde_json::to_value(evaluate_clip("infer", &clipped, &gt, ChannelMode::Y, 0)?)
            .unwrap()
    } else {
        serde_json::json!({ "frames": clipped.len(), "scale": cfg.scale })
    };
    let mpath = a.out.join("metrics.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&metrics).unwrap())
        .map_err(|e| EvError::io(mpath, e))?;
    println!("{} frames -> {}", clipped.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> evtexture::Result<()> {
    let mode: ChannelMode = a.mode.parse()?;
    let pred = io::load_frame_dir(&a.pred, 25.0)?;
    let gt = io::load_frame_dir(&a.gt, 25.0)?;
    let name = a.pred.file_name().and_then(|n| n.to_str()).unwrap_or("clip").to_string();
    let report = evaluate_clip(&name, &pred, &gt, mode, a.border)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_manifest(dir, &format!("mode={:?} border={}", mode, a.border), 0)?;
    }
    std::fs::write(&a.out, serde_json::to_string_pretty(&report).unwrap())
        .map_err(|e| EvError::io(&a.out, e))?;
    println!("psnr {:.4} dB, ssim {:.5} -> {}", report.psnr, report.ssim, a.out.display());
    Ok(())
}

fn cmd_texture_mag(a: TextureMagArgs) -> evtexture::Result<()> {
    let frames = io::load_frame_dir(&a.frames, 25.0)?;
    let mut report = texture_magnitude(&frames, TEXTURE_ALPHA)?;
    if !a.corpus.is_empty() {
        let mut mags = vec![report.magnitude];
        for dir in &a.corpus {
            let f = io::load_frame_dir(dir, 25.0)?;
            mags.push(texture_magnitude(&f, TEXTURE_ALPHA)?.magnitude);
        }
        report.level = Some(bucket_levels(&mags)?[0]);
    }
    println!("{}", report.magnitude);
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            write_manifest(dir, "texture-mag", 0)?;
        }
        std::fs::write(out, serde_json::to_string_pretty(&report).unwrap())
            .map_err(|e| EvError::io(out, e))?;
    }
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> evtexture::Result<()> {
    let frames = io::load_frame_dir(&a.frames, 25.0)?;
    let prof = temporal_profile(&frames, a.column)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_manifest(dir, &format!("column={}", a.column), 0)?;
    }
    io::save_png(&a.out, &prof)?;
    println!("profile {:?} -> {}", prof.dim(), a.out.display());
    Ok(())
}

fn apply_variant(net: &mut NetworkConfig, variant: &str) -> evtexture::Result<()> {
    match variant {
        "model-a" => {
            // motion branch only
            net.texture_branch = false;
        }
        "model-c" => net.updater = UpdaterKind::Conv,
        "model-d" => net.iterative = false,
        "model-e" => net.residual = false,
        "iter3" => net.bins = 3,
        "iter5" => net.bins = 5,
        "iter8" => net.bins = 8,
        other => {
            return Err(EvError::invalid(format!(
                "unknown variant {other:?}; expected model-a/c/d/e or iter3/5/8"
            )))
        }
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> evtexture::Result<()> {
    let (mut spec, text) = load_spec(&a.config)?;
    apply_variant(&mut spec.network, &a.variant)?;
    // voxel bin counts must follow the iteration-count axis
    if a.variant.starts_with("iter") {
        for s in spec.synth_train.iter_mut().chain(spec.synth_val.iter_mut()) {
            s.bins = spec.network.bins;
        }
    }
    if let Some(seed) = a.seed {
        spec.train.seed = seed;
    }
    if let Some(iters) = a.iters {
        spec.train.total_iters = iters;
    }
    let annotated = format!("# variant: {}\n{}", a.variant, text);
    run_training(&spec, &annotated, &a.out)
}

fn run(cli: Cli) -> evtexture::Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Voxelize(a) => cmd_voxelize(a),
        Command::SynthData(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::TextureMag(a) => cmd_texture_mag(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage problems exit 1; --help/--version exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ EvError::Io { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
