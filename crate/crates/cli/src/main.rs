use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use tridistill_core::cache::{CacheRecipe, Refinement, SampleCache};
use tridistill_core::camera::{pose_from_spherical, turntable, CameraPose, DEFAULT_RADIUS, REFERENCE_AZIMUTH_DEG};
use tridistill_core::eval::{evaluate, invert, EvalConfig, InvertConfig};
use tridistill_core::generator::interpolate;
use tridistill_core::image::{contact_sheet, read_png, write_png, FeatureMap};
use tridistill_core::perceptual::RandomPyramid;
use tridistill_core::pipeline::{render_branch, Branch};
use tridistill_core::prior::{ConditionSpec, CorruptionConfig, RefineMode};
use tridistill_core::prune::RandomProjectionEmbedder;
use tridistill_core::reference::{run_reference, ReferencePlan};
use tridistill_core::rng::{derive, stream};
use tridistill_core::trainer::{
    load_checkpoint, resume_state, train_stage1, train_stage2, MetricsRecord, RunDir, TrainConfig, TrainState,
};

const SNAPSHOT_FILE: &str = "run.json";

#[derive(Parser)]
#[command(name = "tridistill", version, about = "Distill an image prior into a triplane 3D generator")]
struct Cli {
    /// Seed for every random draw of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample, prune and refine prior views into a training cache.
    Cache(CacheArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Render a turntable or a single pose from a checkpoint.
    Render(RenderArgs),
    /// Render a latent interpolation at a fixed pose.
    Interpolate(InterpolateArgs),
    /// Recover a latent for a target image.
    Invert(InvertArgs),
    /// Turntable score, 2D/3D consistency gap and diversity of a checkpoint.
    Eval(EvalArgs),
    /// Cache, both stages and evaluations of the pinned reference run.
    Reference(ReferenceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Turntable,
    Pose,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    #[value(name = "2d")]
    Image2d,
    #[value(name = "3d")]
    Volume3d,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Image2d => Branch::Image2d,
            BranchArg::Volume3d => Branch::Volume3d,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RefineArg {
    Locked,
    Free,
}

/// `azimuth,polar[,radius]` in degrees.
fn parse_pose(s: &str) -> std::result::Result<CameraPose, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let (az, polar, radius) = match parts[..] {
        [a, p] => (a, p, DEFAULT_RADIUS),
        [a, p, r] => (a, p, r),
        _ => return Err(format!("expected azimuth,polar[,radius], got {s:?}")),
    };
    if !(radius > 0.0) {
        return Err(format!("radius must be positive, got {radius}"));
    }
    pose_from_spherical(az, polar, radius).map_err(|e| e.to_string())
}

#[derive(Args)]
struct CacheArgs {
    #[arg(long, default_value_t = 0)]
    condition_seed: u64,
    #[arg(long, default_value_t = 2000)]
    n_samples: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    /// Polar angle of the reference view, degrees.
    #[arg(long, default_value_t = 75.0)]
    polar: f64,
    /// Per-sample probability of a pose-error corruption.
    #[arg(long, default_value_t = 0.0)]
    pose_error: f64,
    #[arg(long, default_value_t = 0.0)]
    geometry_warp: f64,
    #[arg(long, default_value_t = 0.0)]
    semantic_swap: f64,
    /// Clean views for threshold calibration; 0 keeps the defaults.
    #[arg(long, default_value_t = 200)]
    calibration_views: usize,
    #[arg(long)]
    tau_sem: Option<f64>,
    #[arg(long)]
    tau_geo: Option<usize>,
    #[arg(long)]
    dilation_radius: Option<usize>,
    #[arg(long, value_enum, default_value = "locked")]
    refine: RefineArg,
    #[arg(long, default_value_t = 0.8)]
    refine_strength: f64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Training config; defaults to the pinned reference config of the stage.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cache directory; defaults to the config's `cache`.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    run: PathBuf,
    /// Continue from the latest checkpoint of the stage.
    #[arg(long)]
    resume: bool,
    /// Resume even if the config differs from the checkpoint's.
    #[arg(long)]
    allow_config_change: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "turntable")]
    mode: Mode,
    #[arg(long, default_value_t = 120)]
    frames: usize,
    /// Start pose of a turntable, or the pose in pose mode.
    #[arg(long, value_parser = parse_pose)]
    pose: Option<CameraPose>,
    #[arg(long, value_enum, default_value = "3d")]
    branch: BranchArg,
    /// Seed of the latent `z`; defaults to `--seed`.
    #[arg(long)]
    latent: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    seed_a: u64,
    #[arg(long)]
    seed_b: u64,
    #[arg(long, default_value_t = 11)]
    steps: usize,
    #[arg(long, value_parser = parse_pose)]
    pose: Option<CameraPose>,
    #[arg(long, value_enum, default_value = "3d")]
    branch: BranchArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// PNG at the model's output resolution.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, value_parser = parse_pose)]
    pose: CameraPose,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = InvertConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = InvertConfig::default().perceptual_weight)]
    perceptual_weight: f64,
    #[arg(long, value_enum, default_value = "2d")]
    branch: BranchArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A cache directory, or an oracle condition seed.
    #[arg(long)]
    condition: String,
    #[arg(long, default_value_t = 120)]
    frames: usize,
    #[arg(long, default_value_t = EvalConfig::default().turntable_latents)]
    turntable_latents: usize,
    #[arg(long, default_value_t = EvalConfig::default().diversity_latents)]
    latents: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReferenceArgs {
    /// Holds the cache, the run directory, evaluations and the summary.
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

/// A failure the user can fix by changing the command line.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Cache(a) => cmd_cache(a, seed.unwrap_or(0)),
        Command::Train(a) => cmd_train(a, seed),
        Command::Render(a) => cmd_render(a, seed.unwrap_or(0)),
        Command::Interpolate(a) => cmd_interpolate(a, seed.unwrap_or(0)),
        Command::Invert(a) => cmd_invert(a, seed.unwrap_or(0)),
        Command::Eval(a) => cmd_eval(a, seed.unwrap_or(0)),
        Command::Reference(a) => cmd_reference(a),
    }
}

fn snapshot(dir: &Path, config: Value) -> Result<()> {
    let doc = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "argv": std::env::args().skip(1).collect::<Vec<_>>(),
        "config": config,
    });
    let path = dir.join(SNAPSHOT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_cache(a: CacheArgs, seed: u64) -> Result<()> {
    let corruption = CorruptionConfig {
        pose_error: a.pose_error,
        geometry_warp: a.geometry_warp,
        semantic_swap: a.semantic_swap,
        ..CorruptionConfig::default()
    };
    corruption.validate().map_err(|e| usage(e.to_string()))?;
    if a.workers == 0 {
        return Err(usage("--workers must be ≥ 1"));
    }
    let recipe = CacheRecipe {
        condition_seed: a.condition_seed,
        reference_polar_deg: a.polar,
        resolution: a.resolution,
        n_samples: a.n_samples,
        corruption,
        refinement: Refinement {
            mode: match a.refine {
                RefineArg::Locked => RefineMode::GeometryLocked,
                RefineArg::Free => RefineMode::GeometryFree,
            },
            strength: a.refine_strength,
        },
        calibration_views: a.calibration_views,
        default_tau_sem: a.tau_sem.unwrap_or(0.5),
        seed,
    };
    let embedder = RandomProjectionEmbedder::default();
    let sampler = recipe.sampler().map_err(|e| usage(e.to_string()))?;
    let mut thresholds = recipe.thresholds(&sampler, &embedder)?;
    if let Some(t) = a.tau_sem {
        thresholds.tau_sem = t;
    }
    if let Some(t) = a.tau_geo {
        thresholds.tau_geo = t;
    }
    if let Some(r) = a.dilation_radius {
        thresholds.dilation_radius = r;
    }
    thresholds.validate().map_err(|e| usage(e.to_string()))?;
    let cache = tridistill_core::cache::build_cache(
        &sampler,
        &embedder,
        recipe.n_samples,
        &thresholds,
        &recipe.refinement,
        &a.out,
        seed,
        a.workers,
    )?;
    snapshot(&a.out, json!({ "recipe": recipe, "thresholds": thresholds }))?;
    let stats = cache.stats.clone().unwrap_or_default();
    println!("{}", serde_json::to_string_pretty(&stats)?);
    eprintln!(
        "kept {} of {} views ({} geometry, {} semantic discards)",
        stats.kept, stats.views, stats.discarded_geometry, stats.discarded_semantic
    );
    Ok(())
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).map_err(|e| usage(e.to_string()))?,
        None => TrainConfig::reference(a.stage),
    };
    if cfg.stage != a.stage {
        return Err(usage(format!("--stage {} given but the config is for stage {}", a.stage, cfg.stage)));
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let cache_dir = a
        .cache
        .clone()
        .or_else(|| cfg.cache.clone())
        .ok_or_else(|| usage("no cache: pass --cache or set `cache` in the config"))?;
    let run = RunDir::create(&a.run)?;
    let stage1 = if a.stage == 2 {
        let path = run.latest_checkpoint(1).ok_or_else(|| {
            anyhow!(
                "stage 2 needs a stage-1 checkpoint in {}; run `train --stage 1 --run {}` first",
                run.root.join("checkpoints").display(),
                run.root.display()
            )
        })?;
        Some(load_checkpoint(&path)?.1)
    } else {
        None
    };
    let resume = if a.resume {
        let st = resume_state(&run, &cfg, a.allow_config_change)?;
        if st.is_none() {
            eprintln!("no stage-{} checkpoint to resume; starting fresh", a.stage);
        }
        st
    } else {
        if run.latest_checkpoint(a.stage).is_some() {
            bail!(
                "{} already holds stage-{} checkpoints; pass --resume to continue",
                run.root.display(),
                a.stage
            );
        }
        None
    };
    let cache = SampleCache::load(&cache_dir)?;
    snapshot(&run.root, json!({ "stage": a.stage, "config_hash": cfg.hash(), "config": cfg }))?;
    let mut progress = |r: &MetricsRecord| eprintln!("{}", serde_json::to_string(r).unwrap_or_default());
    let st: TrainState = match stage1 {
        None => train_stage1(&cfg, &cache, resume, Some(&run), &mut progress)?,
        Some(s1) => train_stage2(&cfg, &s1, &cache, resume, Some(&run), &mut progress)?,
    };
    println!("stage {} finished at iteration {}", st.stage, st.iteration);
    Ok(())
}

fn load_model(path: &Path) -> Result<(TrainConfig, TrainState)> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn default_pose() -> CameraPose {
    pose_from_spherical(REFERENCE_AZIMUTH_DEG, 75.0, DEFAULT_RADIUS).expect("reference pose is valid")
}

fn latent(st: &TrainState, seed: u64) -> Result<Vec<f64>> {
    let g = &st.generator;
    Ok(g.map_latent(&g.sample_z(seed))?)
}

fn write_frames(dir: &Path, frames: &[FeatureMap], cols: usize) -> Result<()> {
    for (i, f) in frames.iter().enumerate() {
        write_png(&dir.join(format!("frame_{i:03}.png")), f)?;
    }
    write_png(&dir.join("contact_sheet.png"), &contact_sheet(frames, cols, [1.0, 1.0, 1.0]))?;
    Ok(())
}

fn cmd_render(a: RenderArgs, seed: u64) -> Result<()> {
    if a.frames == 0 {
        return Err(usage("--frames must be ≥ 1"));
    }
    let (cfg, st) = load_model(&a.ckpt)?;
    let start = a.pose.unwrap_or_else(default_pose);
    let poses = match a.mode {
        Mode::Turntable => turntable(&start, a.frames)?,
        Mode::Pose => vec![start],
    };
    let w = latent(&st, a.latent.unwrap_or(seed))?;
    let render_seed = derive(seed, &[stream("cli.render")]);
    let frames = poses
        .iter()
        .map(|p| render_branch(&st.generator, a.branch.into(), &w, p, &cfg.render, render_seed))
        .collect::<tridistill_core::Result<Vec<_>>>()?;
    create_dir(&a.out)?;
    write_frames(&a.out, &frames, 12)?;
    let poses: Vec<_> = poses.iter().map(|p| p.record()).collect();
    snapshot(&a.out, json!({ "checkpoint": a.ckpt, "config_hash": cfg.hash(), "poses": poses }))?;
    println!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn cmd_interpolate(a: InterpolateArgs, seed: u64) -> Result<()> {
    if a.steps == 0 {
        return Err(usage("--steps must be ≥ 1"));
    }
    let (cfg, st) = load_model(&a.ckpt)?;
    let pose = a.pose.unwrap_or_else(default_pose);
    let (wa, wb) = (latent(&st, a.seed_a)?, latent(&st, a.seed_b)?);
    let ts: Vec<f64> = (0..a.steps)
        .map(|k| if a.steps == 1 { 0.0 } else { k as f64 / (a.steps - 1) as f64 })
        .collect();
    let render_seed = derive(seed, &[stream("cli.render")]);
    let frames = ts
        .iter()
        .map(|&t| {
            let w = interpolate(&wa, &wb, t)?;
            render_branch(&st.generator, a.branch.into(), &w, &pose, &cfg.render, render_seed)
        })
        .collect::<tridistill_core::Result<Vec<_>>>()?;
    create_dir(&a.out)?;
    write_frames(&a.out, &frames, a.steps.min(12))?;
    snapshot(&a.out, json!({ "checkpoint": a.ckpt, "config_hash": cfg.hash(), "t": ts, "pose": pose.record() }))?;
    println!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn cmd_invert(a: InvertArgs, seed: u64) -> Result<()> {
    let (cfg, st) = load_model(&a.ckpt)?;
    let target = read_png(&a.target)?;
    let icfg = InvertConfig {
        steps: a.steps,
        lr: a.lr,
        perceptual_weight: a.perceptual_weight,
        branch: a.branch.into(),
        seed,
    };
    let inv = invert(&st.generator, &cfg.render, &target, &a.pose, &icfg, &RandomPyramid::default())?;
    create_dir(&a.out)?;
    write_png(&a.out.join("reconstruction.png"), &inv.image)?;
    fs::write(a.out.join("w.json"), serde_json::to_string(&inv.w)? + "\n")?;
    let report = json!({ "psnr": inv.psnr, "loss": inv.loss, "best_step": inv.best_step, "steps": a.steps });
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    snapshot(&a.out, json!({ "checkpoint": a.ckpt, "config_hash": cfg.hash(), "invert": icfg, "pose": a.pose.record() }))?;
    println!("PSNR {:.2} dB (best step {})", inv.psnr, inv.best_step);
    Ok(())
}

fn cmd_eval(a: EvalArgs, seed: u64) -> Result<()> {
    let (cfg, st) = load_model(&a.ckpt)?;
    let (reference, pose) = if Path::new(&a.condition).is_dir() {
        let cache = SampleCache::load(Path::new(&a.condition))?;
        (cache.reference_image()?, cache.manifest.reference_pose)
    } else {
        let s: u64 = a
            .condition
            .parse()
            .map_err(|_| usage(format!("--condition {:?} is neither a cache directory nor a seed", a.condition)))?;
        let c = ConditionSpec::oracle(s, 75.0, cfg.image_resolution)?;
        (c.reference_image, c.reference_pose)
    };
    let ecfg = EvalConfig {
        frames: a.frames,
        turntable_latents: a.turntable_latents,
        diversity_latents: a.latents,
        seed,
    };
    let report = evaluate(
        &st.generator,
        &cfg.render,
        &reference,
        &pose,
        &RandomProjectionEmbedder::default(),
        &RandomPyramid::default(),
        &ecfg,
    )?;
    create_dir(&a.out)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(a.out.join("eval.json"), &text)?;
    snapshot(&a.out, json!({ "checkpoint": a.ckpt, "config_hash": cfg.hash(), "eval": ecfg, "condition": a.condition }))?;
    print!("{text}");
    Ok(())
}

fn cmd_reference(a: ReferenceArgs) -> Result<()> {
    let plan = ReferencePlan {
        workers: a.workers.max(1),
        ..ReferencePlan::default()
    };
    create_dir(&a.root)?;
    let summary = run_reference(&a.root, &plan, &mut |m| eprintln!("{m}"))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
