use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rigsplat_core::ablate::{ablate, AblationScenario};
use rigsplat_core::dataset::{load_dataset, Dataset, PoseOverride, SplitName};
use rigsplat_core::fit::{fit_sequence, FitConfig, FitReport};
use rigsplat_core::loss::MetricRegistry;
use rigsplat_core::raster::RasterConfig;
use rigsplat_core::rig::load_rig;
use rigsplat_core::synth::{
    interleaved_split, make_synthetic_limb_rig, make_synthetic_sequence, render_ground_truth, LimbDims, LimbSpec, Motion, OrbitSpec,
};
use rigsplat_core::trainer::{apply_overrides, eval, load_trained, render, train, RunManifest, RunOutput, TrainConfig, RUN_MANIFEST};
use serde::de::DeserializeOwned;
use serde_json::json;

#[derive(Parser)]
#[command(name = "rigsplat", version, about = "Gaussians bound to the triangles of a skinned rig")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic limb dataset.
    Synth(SynthArgs),
    /// Train a Gaussian set on a dataset's training split.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Render a checkpoint for the frames of a dataset split.
    Render(RenderArgs),
    /// Fit a rig's poses to the dataset rig's posed surfaces.
    FitPose(FitPoseArgs),
    /// Run the rig-capacity / pose-quality ablation matrix.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override with dotted keys; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Pose override file (e.g. from `fit-pose`).
    #[arg(long)]
    poses: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "pronation")]
    motion: Motion,
    #[arg(long, default_value_t = 25)]
    frames: usize,
    #[arg(long, default_value_t = 5)]
    test_every: usize,
    #[arg(long, default_value_t = 3)]
    twist_joints: usize,
    #[arg(long, default_value_t = 3)]
    correctives: usize,
    #[arg(long, default_value_t = 1)]
    appearance_seed: u64,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Start from the full-scale preset instead of the desk preset.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: SplitName,
    /// Report directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the mask-bounding-box metrics.
    #[arg(long)]
    no_crop: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: SplitName,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct FitPoseArgs {
    /// Dataset whose rig and poses define the target surfaces.
    #[arg(long)]
    data: PathBuf,
    /// Rig to fit.
    #[arg(long)]
    rig: PathBuf,
    /// Pose override file to write.
    #[arg(long)]
    out: PathBuf,
    /// Fit report; defaults to `<out stem>_report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Start every frame from the rest pose instead of the previous fit.
    #[arg(long)]
    cold: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Train cells concurrently.
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

fn load_config<T: DeserializeOwned + serde::Serialize>(base: T, args: &ConfigArgs) -> Result<T> {
    let base = match &args.config {
        Some(path) => serde_json::from_slice(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?)
            .map_err(|e| rigsplat_core::Error::Config(format!("{}: {e}", path.display())))?,
        None => base,
    };
    Ok(apply_overrides(&base, &args.overrides)?)
}

fn open_dataset(args: &DataArgs) -> Result<Dataset> {
    let ds = load_dataset(&args.data)?;
    Ok(match &args.poses {
        Some(p) => ds.with_pose_override(&PoseOverride::load(p)?)?,
        None => ds,
    })
}

/// Raster settings of the run that produced `checkpoint`, if recorded.
fn run_config(checkpoint: &Path, args: &ConfigArgs) -> Result<TrainConfig> {
    let manifest = checkpoint.parent().map(|d| d.join(RUN_MANIFEST));
    let base = match manifest.filter(|m| m.exists()) {
        Some(m) => serde_json::from_slice::<RunManifest>(&std::fs::read(&m)?)?.config,
        None => TrainConfig::desk(),
    };
    load_config(base, args)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = LimbSpec {
        twist_joints: a.twist_joints,
        correctives: a.correctives,
        ..LimbSpec::high()
    };
    let rig = make_synthetic_limb_rig(spec, LimbDims::default())?;
    let orbit = OrbitSpec {
        width: a.width,
        height: a.height,
        ..OrbitSpec::default()
    };
    let frames = make_synthetic_sequence(&rig, a.motion, a.frames, &orbit)?;
    let split = interleaved_split(a.frames, a.test_every);
    let m = render_ground_truth(&rig, a.appearance_seed, &frames, split, &RasterConfig::default(), &a.out)?;
    info!("{}", json!({"event": "synth", "out": a.out, "frames": m.frames.len(), "train": m.split.train.len(), "test": m.split.test.len()}));
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let base = if a.paper_scale { TrainConfig::paper_scale() } else { TrainConfig::desk() };
    let config = load_config(base, &a.config)?;
    let ds = open_dataset(&a.data)?;
    let rig = ds.load_rig()?;
    std::fs::create_dir_all(&a.out)?;
    let inputs = json!({
        "dataset": a.data.data,
        "pose_override": a.data.poses,
        "command": std::env::args().collect::<Vec<_>>(),
    });
    info!("{}", json!({"event": "train_start", "preset": config.preset, "iters": config.total_iters, "config_hash": format!("{:016x}", config.hash())}));
    let outcome = train(&ds, &rig, &config, Some(&RunOutput { dir: a.out.clone(), inputs }))?;
    info!(
        "{}",
        json!({"event": "train_done", "out": a.out, "gaussians": outcome.gaussians.len(), "final_loss": outcome.final_loss, "seconds": outcome.seconds})
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let config = run_config(&a.checkpoint, &a.config)?;
    let ds = open_dataset(&a.data)?;
    let rig = ds.load_rig()?;
    let set = load_trained(&a.checkpoint)?;
    let report = eval(&ds, a.split, &rig, &set, &config.raster, !a.no_crop, &MetricRegistry::default())?;
    let dir = a
        .out
        .or_else(|| a.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let stem = format!("eval_{}", split_name(a.split));
    report.write(&dir, &stem)?;
    info!("{}", json!({"event": "eval", "split": split_name(a.split), "psnr": report.mean_psnr, "ssim": report.mean_ssim, "report": dir.join(stem)}));
    Ok(())
}

fn split_name(s: SplitName) -> &'static str {
    match s {
        SplitName::Train => "train",
        SplitName::Test => "test",
    }
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let config = run_config(&a.checkpoint, &a.config)?;
    let ds = open_dataset(&a.data)?;
    let rig = ds.load_rig()?;
    let set = load_trained(&a.checkpoint)?;
    let frames: Vec<_> = ds
        .split(a.split)
        .iter()
        .map(|&i| (ds.frames()[i].pose.clone(), ds.frames()[i].camera.clone()))
        .collect();
    let paths = render(&rig, &set, ds.shape(), &frames, &config.raster, &a.out)?;
    info!("{}", json!({"event": "render", "out": a.out, "images": paths.len()}));
    Ok(())
}

#[derive(serde::Serialize)]
struct FitSummary<'a> {
    rig: &'a Path,
    dataset: &'a Path,
    config: &'a FitConfig,
    warm_start: bool,
    mean_distance: f64,
    max_distance: f64,
    frames: Vec<&'a FitReport>,
}

fn fit_pose_cmd(a: FitPoseArgs) -> Result<()> {
    let config = load_config(FitConfig::default(), &a.config)?;
    let ds = load_dataset(&a.data)?;
    let target_rig = ds.load_rig()?;
    let rig = load_rig(&a.rig)?;
    let targets: Vec<_> = ds.frames().iter().map(|f| f.pose.clone()).collect();
    let init = rig.rest_pose();
    let results = fit_sequence(&rig, &target_rig, &targets, ds.shape(), &init, &config, !a.cold)?;
    let rig_ref = std::fs::canonicalize(&a.rig)?;
    PoseOverride {
        rig: Some(rig_ref.to_string_lossy().into_owned()),
        shape: config.fit_shape.then(|| results[0].shape.coefficients.clone()),
        poses: results.iter().map(|r| r.pose.to_flat()).collect(),
    }
    .save(&a.out)?;
    let n = results.len() as f64;
    let summary = FitSummary {
        rig: &a.rig,
        dataset: &a.data,
        config: &config,
        warm_start: !a.cold,
        mean_distance: results.iter().map(|r| r.report.mean_distance).sum::<f64>() / n,
        max_distance: results.iter().map(|r| r.report.max_distance).fold(0.0, f64::max),
        frames: results.iter().map(|r| &r.report).collect(),
    };
    let report = a.report.unwrap_or_else(|| {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "poses".into());
        a.out.with_file_name(format!("{stem}_report.json"))
    });
    std::fs::write(&report, serde_json::to_vec_pretty(&summary)?)?;
    info!("{}", json!({"event": "fit_pose", "frames": results.len(), "mean_distance": summary.mean_distance, "poses": a.out, "report": report}));
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let mut scenario = load_config(AblationScenario::default(), &a.config)?;
    scenario.parallel_cells |= a.parallel;
    let table = ablate(&scenario, &a.out)?;
    for c in &table.cells {
        info!("{}", json!({"event": "ablation_cell", "cell": c.cell, "test_psnr": c.test_psnr, "test_ssim": c.test_ssim}));
    }
    info!("{}", json!({"event": "ablation", "out": a.out, "summary": table.summary}));
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<rigsplat_core::Error>() {
        Some(e) if e.is_numeric() => 3,
        Some(rigsplat_core::Error::Io(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let msg = record.args().to_string();
            let body = serde_json::from_str::<serde_json::Value>(&msg).unwrap_or(serde_json::Value::String(msg));
            writeln!(buf, "{}", json!({"level": record.level().as_str(), "msg": body}))
        })
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::FitPose(a) => fit_pose_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", json!({"event": "error", "error": format!("{e:#}")}));
            ExitCode::from(exit_code(&e))
        }
    }
}
