//! Criteria that need trained models: 6 (overfit and small run), 7
//! (illumination control) and 8 (ablation ordering).
//!
//! Four models share one budget: the full mix, video only, long video
//! (interpolation at five times the spacing) and the full mix without the
//! appearance pathway.

use std::time::Instant;

use mvdiff::backbone::{ModelConfig, Weights};
use mvdiff::dataset::{procedural_scene, SceneData, SceneTruth, TrainingData};
use mvdiff::eval::{evaluate_scene, spearman, EvalCondition, EvalConfig, EvalRow};
use mvdiff::infer::{generate, GenerationRequest};
use mvdiff::optim::{AdamW, AdamWConfig};
use mvdiff::schedule::{NoiseSchedule, ScheduleKind};
use mvdiff::synth::{render_view, Illumination, SynthConfig};
use mvdiff::tasks::{batch_loss, train_step, JitterStrength, SampleBuilder, TrainConfig, Trainer};
use mvdiff::tokens::appearance_descriptor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{outcome, Harness, Outcome};

/// Criteria whose outcome depends on a small training run. They print
/// PASS/FAIL like the rest but do not fail the binary.
pub const REPORTED: [&str; 5] = ["6b", "7a", "7b", "8a", "8b"];

const IMAGE: usize = 16;
const TRAIN_SCENES: usize = 8;
const HELD_OUT_SCENES: usize = 4;
const TRAIN_STEPS: u64 = 2500;
const EVAL_SETS: usize = 2;
const EVAL_ARITIES: [usize; 2] = [2, 3];

fn synth() -> SynthConfig {
    SynthConfig {
        image_height: IMAGE,
        image_width: IMAGE,
        ..SynthConfig::default()
    }
}

fn model(use_appearance: bool) -> ModelConfig {
    ModelConfig {
        width: 64,
        depth: 4,
        heads: 4,
        patch_size: 4,
        image_height: IMAGE,
        image_width: IMAGE,
        appearance_dim: 32,
        max_frames: 65,
        mlp_ratio: 4,
        use_appearance,
    }
}

fn train_config(task_mix: f64, baseline_multiplier: usize) -> TrainConfig {
    TrainConfig {
        task_mix,
        baseline_multiplier,
        batch_size: 4,
        steps: TRAIN_STEPS,
        arity_weights: [2.0, 1.0, 0.0, 0.0],
        optimizer: AdamWConfig {
            lr: 1e-3,
            warmup_steps: 100,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(1000, ScheduleKind::Cosine).unwrap()
}

struct Fixture {
    train: TrainingData,
    held_out: Vec<(SceneData, SceneTruth)>,
}

fn fixture() -> Fixture {
    let cfg = synth();
    let train = (0..TRAIN_SCENES)
        .map(|id| procedural_scene(100, id, 8, 161, &cfg).unwrap().0)
        .collect();
    let held_out = (0..HELD_OUT_SCENES)
        .map(|id| procedural_scene(200, id, 8, 97, &cfg).unwrap())
        .collect();
    Fixture {
        train: TrainingData { scenes: train },
        held_out,
    }
}

fn train(fx: &Fixture, name: &str, use_appearance: bool, cfg: TrainConfig) -> Weights<f32> {
    let t0 = Instant::now();
    let weights = Weights::init(&model(use_appearance), 1).unwrap();
    let mut trainer = Trainer::new(weights, cfg, schedule(), 2).unwrap();
    let mut window = 0.0;
    while trainer.step() < TRAIN_STEPS {
        window += trainer.train_once(&fx.train).unwrap();
        if trainer.step() % 500 == 0 {
            eprintln!(
                "  {name}: step {} loss {:.4} ({:.0}s)",
                trainer.step(),
                window / 500.0,
                t0.elapsed().as_secs_f64()
            );
            window = 0.0;
        }
    }
    trainer.weights
}

fn eval_rows(fx: &Fixture, w: &Weights<f32>, condition: EvalCondition) -> Vec<EvalRow> {
    let cfg = EvalConfig {
        condition,
        arities: EVAL_ARITIES.to_vec(),
        sets: EVAL_SETS,
        seed: 5,
        ..EvalConfig::default()
    };
    let s = schedule();
    fx.held_out
        .iter()
        .flat_map(|(d, t)| evaluate_scene(w, &s, d, t, &cfg).unwrap().0)
        .collect()
}

fn mean(rows: &[EvalRow], f: fn(&EvalRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

// 6a --------------------------------------------------------------------------

fn overfit() -> Outcome {
    let cfg = ModelConfig {
        width: 128,
        depth: 4,
        heads: 4,
        patch_size: 4,
        image_height: 32,
        image_width: 32,
        appearance_dim: 32,
        ..ModelConfig::default()
    };
    let s = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
    let synth = SynthConfig::default();
    let (scene, _) = procedural_scene(300, 0, 4, 17, &synth).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = vec![SampleBuilder::new(&s, 4, 32)
        .build_interpolation_sample(&scene.clip, &[], 2, 1, &JitterStrength::default(), (0.3, 0.25), &mut rng)
        .unwrap()];
    let mut w = Weights::init(&cfg, 7).unwrap();
    let mut opt = AdamW::new(
        &cfg,
        AdamWConfig {
            lr: 1e-3,
            warmup_steps: 20,
            ..AdamWConfig::default()
        },
    )
    .unwrap();
    let initial = batch_loss(&w, &batch).unwrap();
    let mut curve = Vec::with_capacity(500);
    for _ in 0..500 {
        curve.push(train_step(&mut w, &batch, &mut opt).unwrap());
    }
    let last = batch_loss(&w, &batch).unwrap();
    let reduction = 1.0 - last / initial;
    // smoothed curve over windows of 50 steps
    let smooth: Vec<f32> = curve.chunks(50).map(|c| c.iter().sum::<f32>() / c.len() as f32).collect();
    let monotone = smooth.windows(2).all(|p| p[1] <= p[0]);
    outcome(
        reduction >= 0.9 && monotone,
        format!(
            "loss {initial:.4} -> {last:.4} ({:.1}% reduction); 50-step means non-increasing: {monotone}",
            100.0 * reduction
        ),
    )
}

// 7a --------------------------------------------------------------------------

fn illumination_ramp(fx: &Fixture, w: &Weights<f32>) -> Outcome {
    let s = schedule();
    let levels = [0.55f32, 0.7, 0.85, 1.0, 1.15, 1.3, 1.45];
    let mut desc = vec![[0.0f64; 3]; levels.len()];
    let mut gen = vec![[0.0f64; 3]; levels.len()];
    let scenes = &fx.held_out[..2];
    for (data, truth) in scenes {
        let scene = truth.scene().unwrap();
        let keys = vec![data.clip[0].clone(), data.clip[16].clone()];
        for (li, &level) in levels.iter().enumerate() {
            let (src, _) = render_view(&scene, &truth.clip_poses[8], &Illumination::brightness(level), None, &truth.synth).unwrap();
            let src = src.quantized();
            let d = appearance_descriptor(&src, w.config.appearance_dim).unwrap().channel_means();
            let req = GenerationRequest {
                appearance_source: Some(src),
                ..GenerationRequest::new(keys.clone(), 21)
            };
            let frames = generate(w, &s, &req).unwrap().frames;
            for c in 0..3 {
                desc[li][c] += d[c] as f64;
                gen[li][c] += frames.iter().map(|f| f.channel_means()[c] as f64).sum::<f64>() / frames.len() as f64;
            }
        }
    }
    let rho: Vec<f64> = (0..3)
        .map(|c| {
            let a: Vec<f64> = desc.iter().map(|v| v[c]).collect();
            let b: Vec<f64> = gen.iter().map(|v| v[c]).collect();
            spearman(&a, &b).unwrap()
        })
        .collect();
    let worst = rho.iter().cloned().fold(f64::INFINITY, f64::min);
    let luma: Vec<String> = gen.iter().map(|g| format!("{:.3}", (g[0] + g[1] + g[2]) / (3.0 * scenes.len() as f64))).collect();
    outcome(
        worst >= 0.8,
        format!(
            "Spearman per channel {:.2}/{:.2}/{:.2} over {} brightness levels; output means {}",
            rho[0],
            rho[1],
            rho[2],
            levels.len(),
            luma.join(" ")
        ),
    )
}

pub fn run_all(h: &mut Harness) {
    h.run("6a", "overfit a frozen batch: >= 90% loss reduction in 500 steps", overfit);

    let t0 = Instant::now();
    let fx = fixture();
    eprintln!("training four models for {TRAIN_STEPS} steps each");
    let full = train(&fx, "full", true, train_config(0.5, 1));
    let video_only = train(&fx, "video-only", true, train_config(0.0, 1));
    let long_video = train(&fx, "long-video", true, train_config(0.0, 5));
    let no_appearance = train(&fx, "no-appearance", false, train_config(0.5, 1));
    eprintln!("training done in {:.0}s", t0.elapsed().as_secs_f64());

    let standard = eval_rows(&fx, &full, EvalCondition::Standard);
    h.run("6b", "small run beats crossfade on held-out scenes (PSNR)", || {
        let (p, c) = (mean(&standard, |r| r.psnr), mean(&standard, |r| r.crossfade_psnr));
        outcome(p > c, format!("model {p:.2} dB vs crossfade {c:.2} dB over {} rows", standard.len()))
    });

    h.run("7a", "appearance ramp: rank correlation >= 0.8", || illumination_ramp(&fx, &full));

    let photo_full = eval_rows(&fx, &full, EvalCondition::PhotoStyle);
    let photo_ablated = eval_rows(&fx, &no_appearance, EvalCondition::PhotoStyle);
    h.run("7b", "removing the appearance pathway raises drift >= 2x", || {
        let (a, b) = (mean(&photo_full, |r| r.drift), mean(&photo_ablated, |r| r.drift));
        outcome(b >= 2.0 * a, format!("drift {a:.4} with appearance, {b:.4} without ({:.2}x)", b / a))
    });

    let photo_video = eval_rows(&fx, &video_only, EvalCondition::PhotoStyle);
    h.run("8a", "full beats video-only on photo-style conditions", || {
        let (a, b) = (mean(&photo_full, |r| r.psnr), mean(&photo_video, |r| r.psnr));
        outcome(a > b, format!("full {a:.2} dB vs video-only {b:.2} dB"))
    });

    let overlap_full = eval_rows(&fx, &full, EvalCondition::MinimalOverlap);
    let overlap_long = eval_rows(&fx, &long_video, EvalCondition::MinimalOverlap);
    h.run("8b", "full beats long-video on minimal-overlap conditions", || {
        let (a, b) = (mean(&overlap_full, |r| r.psnr), mean(&overlap_long, |r| r.psnr));
        outcome(a > b, format!("full {a:.2} dB vs long-video {b:.2} dB"))
    });
}
