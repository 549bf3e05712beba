//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test --release --test acceptance`. The quantitative
//! training criteria (6b, 7, 8) train small models from scratch and take
//! most of the runtime.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use clap::Parser;
use mvdiff::backbone::{ModelConfig, Weights};
use mvdiff::commands::{self, Cli, FINAL_CHECKPOINT};
use mvdiff::image::{Image, Mask};
use mvdiff::infer::{chain_windows, generate, generate_chained, output_frames, GenerationRequest};
use mvdiff::schedule::{NoiseSchedule, ScheduleKind, TimestepSubsequence};
use mvdiff::tasks::{batch_loss, JitterStrength, SampleBuilder, MAX_ARITY, MIN_ARITY};
use mvdiff::tokens::{interpolation_frame_indices, INPAINT_RATIO};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[path = "acceptance/training.rs"]
mod training;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Harness {
    failed: Vec<String>,
}

impl Harness {
    fn run(&mut self, id: &str, name: &str, f: impl FnOnce() -> Outcome) {
        let t0 = Instant::now();
        let o = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{id}] {name}: {} ({:.1}s)", o.detail, t0.elapsed().as_secs_f64());
        if !o.pass {
            self.failed.push(id.to_owned());
        }
    }
}

fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> Image {
    Image::from_vec(h, w, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
}

// 1 ---------------------------------------------------------------------------

fn diffusion_moments() -> Outcome {
    let s = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 100_000;
    let x0 = [0.7f64];
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for t in [0usize, 250, 500, 750, 999] {
        let ab = s.alpha_bar(t).unwrap();
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..draws {
            let e: f64 = rng.sample(StandardNormal);
            let x = s.add_noise(&x0, t, &[e]).unwrap()[0];
            sum += x;
            sq += x * x;
        }
        let mean = sum / draws as f64;
        let var = sq / draws as f64 - mean * mean;
        let (m_true, v_true) = (ab.sqrt() * x0[0], 1.0 - ab);
        // mean error relative to the marginal RMS, which stays meaningful as the mean vanishes
        worst_mean = worst_mean.max((mean - m_true).abs() / (v_true + m_true * m_true).sqrt());
        worst_var = worst_var.max((var - v_true).abs() / v_true);
    }
    outcome(
        worst_mean <= 0.01 && worst_var <= 0.01,
        format!("worst mean error {:.3}%, worst variance error {:.3}%", 100.0 * worst_mean, 100.0 * worst_var),
    )
}

fn ddim_round_trip() -> Outcome {
    let s = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let sub = TimestepSubsequence::new(1000, 50).unwrap();
    let mut worst = 0.0f64;
    for clipped in [false, true] {
        let mut x = s.add_noise(&x0, sub.steps[0], &eps).unwrap();
        for (t, tp) in sub.pairs() {
            let ab = s.alpha_bar(t).unwrap();
            // oracle denoiser: the exact noise given the true x0
            let e: Vec<f64> = x.iter().zip(&x0).map(|(x, c)| (x - ab.sqrt() * c) / (1.0 - ab).sqrt()).collect();
            x = if clipped {
                s.ddim_step_clipped(&x, &e, t, tp, 1.0).unwrap()
            } else {
                s.ddim_step(&x, &e, t, tp).unwrap()
            };
        }
        worst = x.iter().zip(&x0).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    outcome(worst <= 1e-5, format!("max |x0_hat - x0| = {worst:.2e} after 50 steps"))
}

// 2 ---------------------------------------------------------------------------

fn mask_exactness() -> Outcome {
    let s = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = Vec::new();
    for (h, w, p) in [(8, 8, 4), (16, 16, 4), (32, 32, 4), (24, 40, 4), (32, 32, 8), (12, 20, 2), (20, 20, 4)] {
        let b = SampleBuilder::new(&s, p, 8);
        let imgs: Vec<Image> = (0..6).map(|_| random_image(h, w, &mut rng)).collect();
        let per = (h / p) * (w / p);
        let expect = (INPAINT_RATIO * per as f64).round() as usize;
        for n in MIN_ARITY..=MAX_ARITY {
            let batch = b.build_inpainting_sample(&imgs, &[], n, &mut rng).unwrap();
            let noised = batch.seq.meta.iter().filter(|m| !m.clean).count();
            if noised != expect || batch.loss_tokens() != expect {
                return outcome(false, format!("{h}x{w}/p{p} n={n}: {noised} noised, expected {expect}"));
            }
        }
        checked.push(format!("{per}->{expect}"));
    }
    outcome(true, format!("tokens per frame -> noised target tokens: {}", checked.join(", ")))
}

// 3 ---------------------------------------------------------------------------

fn loss_localization() -> Outcome {
    let cfg = ModelConfig {
        width: 32,
        depth: 2,
        heads: 4,
        patch_size: 4,
        image_height: 16,
        image_width: 16,
        appearance_dim: 8,
        ..ModelConfig::default()
    };
    let w = Weights::<f32>::init(&cfg, 4).unwrap();
    let s = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
    let b = SampleBuilder::new(&s, 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let imgs: Vec<Image> = (0..4).map(|_| random_image(16, 16, &mut rng)).collect();
    let masks: Vec<Mask> = (0..4)
        .map(|j| {
            let mut m = Mask::empty(16, 16);
            for y in 0..8 {
                for x in 4 * j..4 * j + 6 {
                    m.data[y * 16 + (x % 16)] = true;
                }
            }
            m
        })
        .collect();
    let clip: Vec<Image> = (0..33).map(|_| random_image(16, 16, &mut rng)).collect();
    let clip_masks: Vec<Mask> = (0..33).map(|f| masks[f % 4].clone()).collect();
    let mut mutated = 0usize;
    for k in 0..6 {
        let mut batch = if k % 2 == 0 {
            b.build_inpainting_sample(&imgs, &masks, 3, &mut rng).unwrap()
        } else {
            b.build_interpolation_sample(&clip, &clip_masks, 3, 1, &JitterStrength::default(), (0.5, 0.25), &mut rng)
                .unwrap()
        };
        let before = batch_loss(&w, std::slice::from_ref(&batch)).unwrap();
        let dim = batch.seq.dim;
        for i in 0..batch.seq.len() {
            let m = batch.seq.meta[i];
            if m.clean || m.transient {
                assert!(!batch.loss_mask[i]);
                for v in &mut batch.true_eps[i * dim..(i + 1) * dim] {
                    *v = rng.gen_range(-100.0..100.0);
                }
                for v in &mut batch.x0[i * dim..(i + 1) * dim] {
                    *v = rng.gen_range(-100.0..100.0);
                }
                mutated += 1;
            }
        }
        let after = batch_loss(&w, std::slice::from_ref(&batch)).unwrap();
        if before.to_bits() != after.to_bits() {
            return outcome(false, format!("loss moved from {before} to {after}"));
        }
    }
    outcome(mutated > 0, format!("{mutated} clean or transient tokens relabelled, loss bit-identical"))
}

// 4 ---------------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let s = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
    let b = SampleBuilder::new(&s, 4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let interp = b
        .build_interpolation_sample(&common::clip(17, 1), &[], 2, 1, &JitterStrength::default(), (1.0, 0.5), &mut rng)
        .unwrap();
    let inpaint = b.build_inpainting_sample(&common::clip(3, 2), &[], 2, &mut rng).unwrap();
    let (c1, w1) = common::check(&interp, 11);
    let (c2, w2) = common::check(&inpaint, 12);
    let worst = w1.max(w2);
    outcome(
        c1 >= 100 && c2 >= 100 && worst <= 1e-3,
        format!("{} parameters, worst relative error {worst:.2e}", c1 + c2),
    )
}

// 5 ---------------------------------------------------------------------------

fn arity_contract() -> Outcome {
    let cfg = ModelConfig {
        width: 32,
        depth: 2,
        heads: 4,
        patch_size: 4,
        image_height: 16,
        image_width: 16,
        appearance_dim: 8,
        ..ModelConfig::default()
    };
    let w = Weights::<f32>::init(&cfg, 6).unwrap();
    let s = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
    let b = SampleBuilder::new(&s, 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let clip: Vec<Image> = (0..65).map(|_| random_image(16, 16, &mut rng)).collect();
    let mut frames = Vec::new();
    for n in MIN_ARITY..=MAX_ARITY {
        let batch = b
            .build_interpolation_sample(&clip, &[], n, 1, &JitterStrength::NONE, (0.0, 0.0), &mut rng)
            .unwrap();
        let out = w.forward(&batch.seq).unwrap();
        if out.rows != batch.seq.len() || !out.data.iter().all(|v| v.is_finite()) {
            return outcome(false, format!("bad output for n={n}"));
        }
        frames.push(batch.seq.frame_count());
        let inpaint = b.build_inpainting_sample(&clip[..6], &[], n, &mut rng).unwrap();
        if w.forward(&inpaint.seq).unwrap().rows != inpaint.seq.len() {
            return outcome(false, format!("bad inpainting output for n={n}"));
        }
    }
    outcome(
        frames == [17, 33, 49, 65],
        format!("interpolation layouts of {frames:?} frames and inpainting layouts of 3..6 frames, one weight set"),
    )
}

// 9 ---------------------------------------------------------------------------

fn output_arity() -> Outcome {
    let cfg = common::toy_config();
    let cfg = ModelConfig { max_frames: 65, ..cfg };
    let w = Weights::<f32>::init(&cfg, 8).unwrap();
    let s = NoiseSchedule::new(100, ScheduleKind::Linear).unwrap();
    let keys = common::clip(12, 9);
    let mut seen = Vec::new();
    for n in 2..=12 {
        let mut req = GenerationRequest::new(keys[..n].to_vec(), 1);
        req.steps = 2;
        let video = if n <= MAX_ARITY { generate(&w, &s, &req) } else { generate_chained(&w, &s, &req) }.unwrap();
        let windows = chain_windows(n);
        let shared = windows.windows(2).all(|p| p[0].end - 1 == p[1].start);
        if video.frames.len() != 15 * (n - 1)
            || output_frames(n) != 15 * (n - 1)
            || !shared
            || windows.iter().any(|r| r.len() > MAX_ARITY)
            || (n <= MAX_ARITY && interpolation_frame_indices(n).len() != 16 * (n - 1) + 1)
        {
            return outcome(false, format!("n={n}: {} frames", video.frames.len()));
        }
        seen.push(video.frames.len());
    }
    outcome(true, format!("frames for n=2..12: {seen:?}"))
}

// 10 --------------------------------------------------------------------------

fn run_cli(args: &[&str]) {
    commands::run(Cli::try_parse_from(std::iter::once("mvdiff").chain(args.iter().copied())).unwrap()).unwrap();
}

fn pipeline(root: &Path, config: &Path) {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let cfg = config.to_string_lossy().into_owned();
    run_cli(&["make-data", "--out", &p("data"), "--scenes", "2", "--photos-per-scene", "5", "--clip-len", "33", "--seed", "4", "--config", &cfg]);
    run_cli(&["train", "--config", &cfg, "--data", &p("data"), "--out", &p("run")]);
    let keys = format!("{},{}", p("data/scene_0000/clip/0.png"), p("data/scene_0000/clip/16.png"));
    run_cli(&["generate", "--checkpoint", &p(&format!("run/{FINAL_CHECKPOINT}")), "--keyframes", &keys, "--steps", "10", "--seed", "3", "--out", &p("gen")]);
    run_cli(&["eval", "--checkpoint", &p(&format!("run/{FINAL_CHECKPOINT}")), "--data", &p("data"), "--report", &p("report.json")]);
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let config = r#"
[model]
width = 32
depth = 2
heads = 4
patch_size = 4
image_height = 8
image_width = 8
appearance_dim = 8
[train]
steps = 40
batch_size = 2
checkpoint_every = 20
arity_weights = [1.0, 1.0, 0.0, 0.0]
[train.optimizer]
lr = 0.001
[schedule]
timesteps = 200
[synth]
image_height = 8
image_width = 8
[eval]
arities = [2]
sets = 1
steps = 10
"#;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let c = d.path().join("run.toml");
        fs::write(&c, config).unwrap();
        pipeline(d.path(), &c);
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let identical = ta == tb;

    // cross-platform proxy: reversing token order changes every attention
    // reduction order; outputs must agree to within the declared tolerance
    let cfg = ModelConfig {
        width: 64,
        depth: 3,
        heads: 4,
        patch_size: 4,
        image_height: 16,
        image_width: 16,
        appearance_dim: 8,
        ..ModelConfig::default()
    };
    let w = Weights::<f32>::init(&cfg, 10).unwrap();
    let s = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let clip: Vec<Image> = (0..33).map(|_| random_image(16, 16, &mut rng)).collect();
    let seq = SampleBuilder::new(&s, 4, 8)
        .build_interpolation_sample(&clip, &[], 3, 1, &JitterStrength::NONE, (0.0, 0.0), &mut rng)
        .unwrap()
        .seq;
    let n = seq.len();
    let mut perm = seq.clone();
    for dst in 0..n {
        let src = n - 1 - dst;
        perm.meta[dst] = seq.meta[src];
        perm.latent_mut(dst).copy_from_slice(seq.latent(src));
    }
    let (x, y) = (w.forward(&seq).unwrap(), w.forward(&perm).unwrap());
    let mut dev = 0f32;
    for dst in 0..n {
        for (p, q) in y.row(dst).iter().zip(x.row(n - 1 - dst)) {
            dev = dev.max((p - q).abs());
        }
    }
    outcome(
        identical && dev <= 1e-5,
        format!(
            "{} artifacts byte-identical across two runs: {identical}; reduction-order deviation {dev:.2e}",
            ta.len()
        ),
    )
}

fn main() {
    let mut h = Harness { failed: Vec::new() };
    println!("acceptance criteria");
    h.run("1a", "diffusion moments, 1e5 draws, within 1%", diffusion_moments);
    h.run("1b", "oracle DDIM round trip over 50 steps, <= 1e-5", ddim_round_trip);
    h.run("2", "inpainting noises exactly round(0.8 x tokens) per target", mask_exactness);
    h.run("3", "loss ignores labels at clean and transient tokens", loss_localization);
    h.run("4", "analytic vs finite-difference gradients, <= 1e-3 on >= 100 params", gradient_check);
    h.run("5", "one weight set serves 17/33/49/65-frame layouts", arity_contract);
    training::run_all(&mut h);
    h.run("9", "k = 15(n-1) and chaining arithmetic", output_arity);
    h.run("10", "pinned-seed pipeline is byte-identical; deviation <= 1e-5", determinism);
    if h.failed.is_empty() {
        println!("all criteria passed");
        return;
    }
    println!("failed criteria: {}", h.failed.join(", "));
    // trained-model outcomes are reported; correctness criteria fail the run
    if h.failed.iter().any(|id| !training::REPORTED.contains(&id.as_str())) {
        std::process::exit(1);
    }
}
