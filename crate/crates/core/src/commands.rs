//! Command-line surface: `make-data`, `train`, `generate` and `eval`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_training_data, make_dataset};
use crate::error::{Error, Result};
use crate::eval::{run_eval, EvalCondition, EvalReport};
use crate::backbone::Weights;
use crate::image::{Image, Mask};
use crate::infer::{generate_chained, GeneratedVideo, GenerationRequest};
use crate::tasks::Trainer;

#[derive(Debug, Parser)]
#[command(name = "mvdiff", version, about = "Keyframe-conditioned view interpolation with a masked video diffusion transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural dataset.
    MakeData(MakeDataArgs),
    /// Train a model, optionally resuming from a checkpoint.
    Train(TrainArgs),
    /// Generate the frames between keyframes.
    Generate(GenerateArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct MakeDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub scenes: usize,
    #[arg(long, default_value_t = 6)]
    pub photos_per_scene: usize,
    #[arg(long, default_value_t = 65)]
    pub clip_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run config whose `[synth]` table sets image size and rendering.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct TrainArgs {
    /// Run config (TOML). Optional when resuming.
    #[arg(long, required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Probability of an inpainting sample; 0 trains on video alone.
    #[arg(long)]
    pub task_mix: Option<f64>,
    /// Spacing multiplier between interpolation conditions.
    #[arg(long)]
    pub baseline_mult: Option<usize>,
    /// Continue from this checkpoint, with its config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override the total number of optimiser steps.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub keyframes: Vec<PathBuf>,
    /// One transient mask per keyframe (255 = transient).
    #[arg(long, value_delimiter = ',')]
    pub masks: Vec<PathBuf>,
    /// Illumination reference; defaults to the first keyframe.
    #[arg(long)]
    pub appearance: Option<PathBuf>,
    #[arg(long, default_value_t = crate::infer::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Override the checkpoint's `eval.condition`.
    #[arg(long, value_parser = parse_condition)]
    pub condition: Option<EvalCondition>,
    #[arg(long, value_delimiter = ',')]
    pub arities: Vec<usize>,
    #[arg(long)]
    pub sets: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

fn parse_condition(s: &str) -> std::result::Result<EvalCondition, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| format!("unknown condition {s:?}; use standard, photo_style or minimal_overlap"))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData(a) => make_data(&a),
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Generate(a) => generate(&a).map(|_| ()),
        Command::Eval(a) => eval(&a).map(|_| ()),
    }
}

pub fn make_data(a: &MakeDataArgs) -> Result<()> {
    let synth = match &a.config {
        Some(p) => RunConfig::load(p)?.synth,
        None => Default::default(),
    };
    make_dataset(&a.out, a.scenes, a.photos_per_scene, a.clip_len, a.seed, &synth)?;
    info!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("step_{step:06}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOSS_LOG: &str = "loss.csv";

/// Trains until the configured step count. Writes `loss.csv` (one row per
/// step), periodic `step_<n>.ckpt` files and `final.ckpt`. Returns the final
/// checkpoint.
pub fn train(a: &TrainArgs) -> Result<Checkpoint> {
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut config = match (&resumed, &a.config) {
        (Some(ck), _) => ck.config.clone(),
        (None, Some(p)) => RunConfig::load(p)?,
        (None, None) => return Err(Error::Config("either --config or --resume is required".into())),
    };
    if let Some(r) = a.task_mix {
        config.train.task_mix = r;
    }
    if let Some(m) = a.baseline_mult {
        config.train.baseline_multiplier = m;
    }
    if let Some(s) = a.steps {
        config.train.steps = s;
    }
    config.validate()?;

    let data = load_training_data(&a.data)?;
    let (h, w) = (config.model.image_height, config.model.image_width);
    if let Some(bad) = data.scenes.iter().flat_map(|s| s.photos.iter().chain(&s.clip)).find(|i| (i.height, i.width) != (h, w)) {
        return Err(Error::Dataset(format!(
            "data holds {}x{} images but the model expects {h}x{w}",
            bad.height, bad.width
        )));
    }

    let schedule = config.schedule.build()?;
    let weights = match &resumed {
        Some(ck) => ck.weights.clone(),
        None => Weights::init(&config.model, config.seeds.init)?,
    };
    let mut trainer = Trainer::new(weights, config.train.clone(), schedule, config.seeds.train)?;
    if let Some(ck) = resumed {
        let mut opt = ck
            .optimizer
            .ok_or_else(|| Error::Checkpoint("cannot resume from a checkpoint without optimiser state".into()))?;
        opt.config = config.train.optimizer;
        trainer.opt = opt;
    }

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let log_path = a.out.join(LOSS_LOG);
    let mut log = if trainer.step() == 0 {
        String::from("step,loss,lr\n")
    } else {
        // keep rows up to the resumed step
        let old = fs::read_to_string(&log_path).unwrap_or_default();
        let mut kept = String::from("step,loss,lr\n");
        for line in old.lines().skip(1) {
            if line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= trainer.step()) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        kept
    };

    let snapshot = |trainer: &Trainer| Checkpoint {
        config: config.clone(),
        weights: trainer.weights.clone(),
        optimizer: Some(trainer.opt.clone()),
    };
    let t0 = Instant::now();
    let (mut window, mut count) = (0.0f64, 0u64);
    while trainer.step() < config.train.steps {
        let lr = trainer.opt.config.lr_at(trainer.step());
        let loss = trainer.train_once(&data)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: trainer.step() });
        }
        let step = trainer.step();
        let _ = writeln!(log, "{step},{loss},{lr}");
        window += loss as f64;
        count += 1;
        if config.train.log_every > 0 && step % config.train.log_every == 0 {
            info!("step {step} loss {:.5} ({:.1}s)", window / count as f64, t0.elapsed().as_secs_f64());
            (window, count) = (0.0, 0);
        }
        if config.train.checkpoint_every > 0 && step % config.train.checkpoint_every == 0 {
            snapshot(&trainer).save(&checkpoint_path(&a.out, step))?;
            fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
        }
    }
    fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    let ck = snapshot(&trainer);
    ck.save(&a.out.join(FINAL_CHECKPOINT))?;
    Ok(ck)
}

/// Writes `frame_0001.png..` (intermediates only) and `provenance.json`.
pub fn generate(a: &GenerateArgs) -> Result<GeneratedVideo> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let keyframes = a.keyframes.iter().map(|p| Image::load_png(p)).collect::<Result<Vec<_>>>()?;
    let transient_masks = if a.masks.is_empty() {
        None
    } else {
        Some(a.masks.iter().map(|p| Mask::load_png(p)).collect::<Result<Vec<_>>>()?)
    };
    let request = GenerationRequest {
        keyframes,
        transient_masks,
        appearance_source: a.appearance.as_deref().map(Image::load_png).transpose()?,
        steps: a.steps,
        seed: a.seed,
    };
    let schedule = ck.config.schedule.build()?;
    let video = generate_chained(&ck.weights, &schedule, &request)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (i, frame) in video.frames.iter().enumerate() {
        frame.save_png(&a.out.join(format!("frame_{:04}.png", i + 1)))?;
    }
    let path = a.out.join("provenance.json");
    fs::write(&path, serde_json::to_string_pretty(&video.provenance)?).map_err(|e| Error::io(&path, e))?;
    info!("wrote {} frames to {}", video.frames.len(), a.out.display());
    Ok(video)
}

pub fn eval(a: &EvalArgs) -> Result<EvalReport> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = ck.config.eval.clone();
    if let Some(c) = a.condition {
        cfg.condition = c;
    }
    if !a.arities.is_empty() {
        cfg.arities = a.arities.clone();
    }
    if let Some(s) = a.sets {
        cfg.sets = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let schedule = ck.config.schedule.build()?;
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let report = run_eval(&ck.weights, &schedule, &a.data, Some(&a.report), &cfg)?;
    let agg = &report.aggregate;
    info!(
        "psnr {:.3} dB vs crossfade {:.3} dB over {} rows",
        agg.psnr,
        agg.crossfade_psnr,
        report.rows.len()
    );
    Ok(report)
}
