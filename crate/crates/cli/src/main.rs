//! `avatar`: optimize, render, animate and export articulated radiance-field avatars.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid config or arguments,
//! 3 guidance unreachable, 4 corrupt checkpoint, 5 malformed pose sequence,
//! 6 empty mesh surface, 7 gradient check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avatar_core::export::{self, CameraSpec, ExportError, PoseSequence};
use avatar_core::gradcheck::{self, GradCheckConfig};
use avatar_core::guidance::{GuidanceError, GuidanceSpec};
use avatar_core::render::{RenderMode, RenderSettings};
use avatar_core::trainer::{
    procedural_dataset, run, Checkpoint, Guidance, ProceduralDatasetSpec, RunPaths, TrainConfig, TrainError, Trainer,
};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Parser)]
#[command(name = "avatar", version, about = "Articulated radiance-field avatars")]
struct Cli {
    /// Print a JSON object instead of human-readable lines.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an avatar and write checkpoints plus JSON-lines metrics.
    Optimize(OptimizeArgs),
    /// Render a checkpoint in one pose.
    Render(RenderArgs),
    /// Render a checkpoint through a pose sequence, one PNG per frame.
    Animate(AnimateArgs),
    /// Extract a colored triangle mesh as OBJ.
    ExportMesh(ExportMeshArgs),
    /// Compare every analytic gradient against finite differences.
    CheckGrads(CheckGradsArgs),
    /// Render posed views of the procedural avatar for photometric guidance.
    Dataset(DatasetArgs),
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    /// builtin:photometric:<dir> | builtin:gaussian:<image> | remote:<host:port>
    #[arg(long)]
    guidance: String,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ViewArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Render settings and resolution are read from this training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Image width and height in pixels.
    #[arg(long)]
    resolution: Option<usize>,
    /// "az,el,r,focal": radians, meters, pixels.
    #[arg(long)]
    camera: Option<String>,
    /// shaded | albedo | normals | mask
    #[arg(long, default_value = "shaded")]
    mode: String,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    view: ViewArgs,
    /// "rest" or a JSON file with one axis-angle triplet per joint.
    #[arg(long, default_value = "rest")]
    pose: String,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnimateArgs {
    #[command(flatten)]
    view: ViewArgs,
    /// Pose sequence JSON: {"fps": f, "frames": [[[x, y, z], ...], ...]}.
    #[arg(long)]
    pose: PathBuf,
    /// Output directory for frame_000001.png onward.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportMeshArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "rest")]
    pose: String,
    /// Grid cells along the longest body axis, 32 to 512.
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    /// Output OBJ.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckGradsArgs {
    /// Training config whose field architecture is checked (default: a width-16 net).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probes over the field parameters.
    #[arg(long, default_value_t = 200)]
    probes: usize,
    /// Relative error each probe must stay under.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Camera, pose-prior and render settings are read from this training config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Guidance(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Sequence(String),
    #[error("{0}")]
    EmptyMesh(String),
    #[error("gradient check failed")]
    Gradients(Value),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Guidance(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Sequence(_) => 5,
            CliError::EmptyMesh(_) => 6,
            CliError::Gradients(_) => 7,
        }
    }
}

fn guidance_error(e: &GuidanceError) -> CliError {
    match e {
        GuidanceError::Transport { .. } | GuidanceError::Timeout { .. } => CliError::Guidance(e.to_string()),
        GuidanceError::Request { source, .. } => guidance_error(source),
        _ => CliError::Other(e.to_string()),
    }
}

fn train_error(e: TrainError) -> CliError {
    match &e {
        TrainError::InvalidConfig(_) | TrainError::MissingField(_) | TrainError::Dataset(_) => CliError::Config(e.to_string()),
        TrainError::Checkpoint(_) => CliError::Checkpoint(e.to_string()),
        TrainError::Guidance(g) => guidance_error(g),
        _ => CliError::Other(e.to_string()),
    }
}

fn export_error(e: ExportError) -> CliError {
    match e {
        ExportError::Sequence { .. } => CliError::Sequence(e.to_string()),
        ExportError::EmptySurface => CliError::EmptyMesh(e.to_string()),
        ExportError::Pose(_) | ExportError::CameraSpec(_) | ExportError::Resolution(_) => CliError::Config(e.to_string()),
        ExportError::Train(t) => train_error(t),
        other => CliError::Other(other.to_string()),
    }
}

fn load_config(path: &Path) -> Result<TrainConfig, CliError> {
    let cfg = TrainConfig::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(train_error)?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
}

fn optimize(args: &OptimizeArgs, json: bool) -> Result<Value, CliError> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.require_prompt().map_err(train_error)?;
    let spec: GuidanceSpec = args.guidance.parse().map_err(|e: GuidanceError| CliError::Config(e.to_string()))?;
    let guidance = Guidance::from_spec(&spec, &config).map_err(train_error)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            Trainer::with_state(config, guidance, ckpt.state)
        }
        None => Trainer::new(config, guidance),
    }
    .map_err(train_error)?;
    let start = trainer.state.step;
    let total = trainer.config().iterations;
    let every = (total / 20).max(1);
    let paths = RunPaths::new(&args.out);
    let ckpt = run(&mut trainer, &paths, |r| {
        if !json && (r.step % every == 0 || r.step == total) {
            eprintln!("step {:>6}/{total}  loss {:.5}", r.step, r.breakdown.total);
        }
    })
    .map_err(train_error)?;
    Ok(json!({
        "command": "optimize",
        "start_step": start,
        "final_step": ckpt.state.step,
        "checkpoint": paths.final_checkpoint(),
        "metrics": paths.metrics(),
    }))
}

struct View {
    settings: RenderSettings,
    resolution: usize,
    mode: RenderMode,
    spec: CameraSpec,
}

fn view(args: &ViewArgs) -> Result<View, CliError> {
    let config = args.config.as_deref().map(load_config).transpose()?;
    let resolution = args.resolution.or(config.as_ref().map(|c| c.resolution)).unwrap_or(64);
    if resolution == 0 {
        return Err(CliError::Config("resolution must be > 0".into()));
    }
    let settings = config.map(|c| c.render).unwrap_or_default();
    let mode: RenderMode = args.mode.parse().map_err(|e: avatar_core::render::RenderError| CliError::Config(e.to_string()))?;
    let spec = match &args.camera {
        Some(s) => s.parse().map_err(export_error)?,
        None => {
            let d = CameraSpec::default();
            CameraSpec { focal: d.focal * resolution as f64 / 64.0, ..d }
        }
    };
    Ok(View { settings, resolution, mode, spec })
}

fn render_cmd(args: &RenderArgs) -> Result<Value, CliError> {
    let v = view(&args.view)?;
    let ckpt = load_checkpoint(&args.view.checkpoint)?;
    let skeleton = ckpt.skeleton().map_err(|e| CliError::Checkpoint(e.to_string()))?;
    let pose = export::load_pose(&args.pose, skeleton.joint_count()).map_err(export_error)?;
    let camera = v.spec.camera(&skeleton, &ckpt.state.shape, v.resolution).map_err(export_error)?;
    let img = export::render_frame(&ckpt.state, &skeleton, &pose, &camera, &v.settings, v.mode).map_err(export_error)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Other(e.to_string()))?;
    }
    img.write_png(&args.out).map_err(|e| CliError::Other(e.to_string()))?;
    let mut out = json!({ "command": "render", "mode": v.mode.name(), "png": args.out });
    if matches!(v.mode, RenderMode::Normals | RenderMode::Mask) {
        let pfm = args.out.with_extension("pfm");
        img.write_pfm(&pfm).map_err(|e| CliError::Other(e.to_string()))?;
        out["pfm"] = json!(pfm);
    }
    Ok(out)
}

fn animate_cmd(args: &AnimateArgs) -> Result<Value, CliError> {
    let v = view(&args.view)?;
    let ckpt = load_checkpoint(&args.view.checkpoint)?;
    let skeleton = ckpt.skeleton().map_err(|e| CliError::Checkpoint(e.to_string()))?;
    let seq = PoseSequence::load(&args.pose, skeleton.joint_count()).map_err(|e| match e {
        ExportError::Io(io) => CliError::Sequence(format!("{}: {io}", args.pose.display())),
        other => export_error(other),
    })?;
    let camera = v.spec.camera(&skeleton, &ckpt.state.shape, v.resolution).map_err(export_error)?;
    let frames = export::animate(&ckpt.state, &skeleton, &seq, &camera, &v.settings, v.mode, &args.out).map_err(export_error)?;
    Ok(json!({
        "command": "animate",
        "mode": v.mode.name(),
        "fps": seq.fps,
        "frames": frames.len(),
        "dir": args.out,
    }))
}

fn export_mesh_cmd(args: &ExportMeshArgs) -> Result<Value, CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let skeleton = ckpt.skeleton().map_err(|e| CliError::Checkpoint(e.to_string()))?;
    let pose = export::load_pose(&args.pose, skeleton.joint_count()).map_err(export_error)?;
    let mesh = export::extract_mesh(&ckpt.state.params, &skeleton, &pose.cast(), &ckpt.state.shape, args.resolution)
        .map_err(export_error)?;
    mesh.save_obj(&args.out).map_err(export_error)?;
    Ok(json!({
        "command": "export-mesh",
        "vertices": mesh.vertices.len(),
        "faces": mesh.triangles.len(),
        "obj": args.out,
    }))
}

fn check_grads_cmd(args: &CheckGradsArgs) -> Result<(Value, String), CliError> {
    let arch = match &args.config {
        Some(p) => load_config(p)?.field,
        None => gradcheck::tiny_arch(),
    };
    let cfg = GradCheckConfig {
        arch,
        seed: args.seed,
        probes: args.probes,
        tolerance: args.tolerance,
        ..GradCheckConfig::default()
    };
    let report = gradcheck::run(&cfg);
    let value = json!({ "command": "check-grads", "passed": report.passed(), "report": report });
    if report.passed() {
        Ok((value, report.to_text()))
    } else {
        eprint!("{}", report.to_text());
        Err(CliError::Gradients(value))
    }
}

fn dataset_cmd(args: &DatasetArgs) -> Result<Value, CliError> {
    let mut spec = ProceduralDatasetSpec {
        views: args.views,
        resolution: args.resolution,
        seed: args.seed,
        ..ProceduralDatasetSpec::default()
    };
    let skeleton = match &args.config {
        Some(p) => {
            let cfg = load_config(p)?;
            spec.camera = cfg.camera.clone();
            spec.pose = cfg.pose.clone();
            spec.settings = cfg.render.clone();
            cfg.skeleton_config().map_err(train_error)?
        }
        None => Default::default(),
    };
    if spec.views == 0 || spec.resolution == 0 {
        return Err(CliError::Config("views and resolution must be > 0".into()));
    }
    let data = procedural_dataset(&skeleton, &spec).map_err(train_error)?;
    data.save(&args.out).map_err(train_error)?;
    Ok(json!({ "command": "dataset", "views": data.len(), "dir": args.out }))
}

fn print_human(v: &Value) {
    if let Value::Object(map) = v {
        for (k, val) in map {
            match val {
                Value::String(s) => println!("{k}: {s}"),
                other => println!("{k}: {other}"),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Optimize(a) => optimize(a, cli.json).map(|v| (v, None)),
        Command::Render(a) => render_cmd(a).map(|v| (v, None)),
        Command::Animate(a) => animate_cmd(a).map(|v| (v, None)),
        Command::ExportMesh(a) => export_mesh_cmd(a).map(|v| (v, None)),
        Command::CheckGrads(a) => check_grads_cmd(a).map(|(v, t)| (v, Some(t))),
        Command::Dataset(a) => dataset_cmd(a).map(|v| (v, None)),
    };
    match result {
        Ok((value, text)) => {
            if cli.json {
                println!("{value}");
            } else if let Some(text) = text {
                print!("{text}");
            } else {
                print_human(&value);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.code();
            if cli.json {
                let mut v = json!({ "error": e.to_string(), "exit_code": code });
                if let CliError::Gradients(report) = &e {
                    v["report"] = report["report"].clone();
                }
                println!("{v}");
            }
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
