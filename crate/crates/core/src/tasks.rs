//! Training samples for both objectives, their augmentations, the masked
//! denoising loss, and the optimisation loop.
//!
//! Neither builder attaches a task label the backbone could read: the two
//! objectives differ only in which tokens are clean, which are noisy, and how
//! frames are indexed.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{param_grads, Weights};
use crate::dataset::TrainingData;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::linalg::{Mat, Real};
use crate::optim::{AdamW, AdamWConfig};
use crate::schedule::NoiseSchedule;
use crate::tokens::{
    appearance_descriptor, mask_to_tokens, select_inpaint_mask, AppearanceDescriptor, FrameLatent,
    FrameRole, LatentCodec, PixelCodec, TokenSequence, FRAME_STRIDE, INPAINT_RATIO,
};

pub const MIN_ARITY: usize = 2;
pub const MAX_ARITY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Inpainting,
    Interpolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterStrength {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl Default for JitterStrength {
    fn default() -> Self {
        Self {
            brightness: 0.8,
            contrast: 0.8,
            saturation: 0.8,
            hue: 0.2,
        }
    }
}

impl JitterStrength {
    pub const NONE: JitterStrength = JitterStrength {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Probability that a sample is an inpainting sample; 0 trains on
    /// interpolation alone.
    pub task_mix: f64,
    pub jitter: JitterStrength,
    pub condition_mask_prob: f64,
    /// Fraction of the token grid covered by one condition mask.
    pub condition_mask_region: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Spacing multiplier between interpolation conditions.
    pub baseline_multiplier: usize,
    /// Relative sampling weights of n = 2, 3, 4, 5.
    pub arity_weights: [f64; 4],
    pub optimizer: AdamWConfig,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task_mix: 0.5,
            jitter: JitterStrength::default(),
            condition_mask_prob: 0.3,
            condition_mask_region: 0.25,
            batch_size: 4,
            steps: 1000,
            baseline_multiplier: 1,
            arity_weights: [1.0; 4],
            optimizer: AdamWConfig::default(),
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name} = {p} is not a probability")))
            }
        };
        prob("task_mix", self.task_mix)?;
        prob("condition_mask_prob", self.condition_mask_prob)?;
        prob("condition_mask_region", self.condition_mask_region)?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.baseline_multiplier == 0 {
            return Err(Error::Config("train.baseline_multiplier must be at least 1".into()));
        }
        if self.arity_weights.iter().any(|w| !(*w >= 0.0)) || self.arity_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("train.arity_weights must be non-negative with a positive sum".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("train.optimizer.lr must be positive".into()));
        }
        Ok(())
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub seq: TokenSequence,
    /// `tokens × dim`; zero on clean tokens.
    pub true_eps: Vec<f32>,
    /// Clean latents, `tokens × dim`.
    pub x0: Vec<f32>,
    pub loss_mask: Vec<bool>,
    pub t: usize,
    pub task: Task,
}

impl TaskBatch {
    pub fn loss_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&b| b).count()
    }
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

fn luma(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn map_pixels(image: &mut Image, f: impl Fn([f32; 3]) -> [f32; 3]) {
    for px in image.data.chunks_exact_mut(3) {
        let out = f([px[0], px[1], px[2]]);
        for c in 0..3 {
            px[c] = out[c].clamp(0.0, 1.0);
        }
    }
}

/// Rotation by `turns · 2π` about the grey axis of RGB space.
fn hue_matrix(turns: f32) -> [[f32; 3]; 3] {
    let (s, c) = (turns * std::f32::consts::TAU).sin_cos();
    let k = 1.0 / 3.0f32;
    let r = (1.0 / 3.0f32).sqrt();
    let a = c + k * (1.0 - c);
    let b = k * (1.0 - c) - r * s;
    let d = k * (1.0 - c) + r * s;
    [[a, b, d], [d, a, b], [b, d, a]]
}

/// Brightness, contrast, saturation and hue changes in random order, each
/// clamped to `[0, 1]`. Zero strength leaves the image untouched.
pub fn color_jitter(image: &Image, rng: &mut impl Rng, strength: &JitterStrength) -> Image {
    let mut out = image.clone();
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 if strength.brightness > 0.0 => {
                let b = rng.gen_range(1.0 - strength.brightness..=1.0 + strength.brightness);
                map_pixels(&mut out, |p| [p[0] * b, p[1] * b, p[2] * b]);
            }
            1 if strength.contrast > 0.0 => {
                let k = rng.gen_range(1.0 - strength.contrast..=1.0 + strength.contrast);
                let mean = {
                    let m = out.channel_means();
                    luma(m)
                };
                map_pixels(&mut out, |p| p.map(|v| (v - mean) * k + mean));
            }
            2 if strength.saturation > 0.0 => {
                let k = rng.gen_range(1.0 - strength.saturation..=1.0 + strength.saturation);
                map_pixels(&mut out, |p| {
                    let g = luma(p);
                    p.map(|v| (v - g) * k + g)
                });
            }
            3 if strength.hue > 0.0 => {
                let m = hue_matrix(rng.gen_range(-strength.hue..=strength.hue));
                map_pixels(&mut out, |p| {
                    [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2])
                });
            }
            _ => {}
        }
    }
    out
}

/// With probability `prob`, replaces one rectangular block covering
/// `round(region · tokens)` grid cells by the mask token.
pub fn random_condition_mask(frame: &FrameLatent, rng: &mut impl Rng, prob: f64, region: f64) -> FrameLatent {
    let mut out = frame.clone();
    if prob <= 0.0 || region <= 0.0 || !rng.gen_bool(prob.min(1.0)) {
        return out;
    }
    let (gh, gw) = (frame.grid_h, frame.grid_w);
    let count = ((region.min(1.0) * (gh * gw) as f64).round() as usize).min(gh * gw);
    if count == 0 {
        return out;
    }
    // random aspect; the last row of the block may be partial so the count is exact
    let aspect: f64 = rng.gen_range(0.5..2.0);
    let mut w = ((count as f64 * aspect).sqrt().round() as usize).clamp(1, gw);
    let mut h = count.div_ceil(w);
    if h > gh {
        h = gh;
        w = count.div_ceil(h).min(gw);
    }
    let y0 = rng.gen_range(0..=gh - h);
    let x0 = rng.gen_range(0..=gw - w);
    for k in 0..count {
        let (dy, dx) = (k / w, k % w);
        out.masked[(y0 + dy) * gw + x0 + dx] = true;
    }
    out
}

// ---------------------------------------------------------------------------
// Sample builders
// ---------------------------------------------------------------------------

/// Shared state for building samples: latent codec, patch size, appearance
/// width and the noise schedule.
pub struct SampleBuilder<'a> {
    pub codec: &'a dyn LatentCodec,
    pub schedule: &'a NoiseSchedule,
    pub patch: usize,
    pub appearance_dim: usize,
}

impl<'a> SampleBuilder<'a> {
    pub fn new(schedule: &'a NoiseSchedule, patch: usize, appearance_dim: usize) -> Self {
        Self {
            codec: &PixelCodec,
            schedule,
            patch,
            appearance_dim,
        }
    }

    fn encode(&self, image: &Image, index: usize, role: FrameRole) -> Result<FrameLatent> {
        let mut f = self.codec.encode(image, self.patch)?;
        f.frame_index = index;
        f.role = role;
        Ok(f)
    }

    fn transient_tokens(&self, mask: Option<&Mask>, tokens: usize) -> Result<Vec<bool>> {
        match mask {
            Some(m) => mask_to_tokens(m, self.patch),
            None => Ok(vec![false; tokens]),
        }
    }

    /// Noises the flagged tokens at a random `t` and packages the sample.
    fn finish(
        &self,
        frames: Vec<FrameLatent>,
        noisy: Vec<Vec<bool>>,
        transient: Vec<Vec<bool>>,
        appearance: Vec<AppearanceDescriptor>,
        task: Task,
        rng: &mut impl Rng,
    ) -> Result<TaskBatch> {
        let t = rng.gen_range(0..self.schedule.len());
        let mut seq = TokenSequence::assemble(&frames, &noisy, &transient, t, &appearance)?;
        let dim = seq.dim;
        let x0 = seq.latents.clone();
        let mut true_eps = vec![0.0f32; x0.len()];
        let mut loss_mask = vec![false; seq.len()];
        for i in 0..seq.len() {
            let m = seq.meta[i];
            if m.clean {
                continue;
            }
            let eps: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let noised = self.schedule.add_noise(seq.latent(i), t, &eps)?;
            seq.latent_mut(i).copy_from_slice(&noised);
            true_eps[i * dim..(i + 1) * dim].copy_from_slice(&eps);
            loss_mask[i] = !m.transient;
        }
        Ok(TaskBatch {
            seq,
            true_eps,
            x0,
            loss_mask,
            t,
            task,
        })
    }

    /// `n` clean condition photos plus one target at frame index `n` with
    /// `round(0.8 · tokens)` of its tokens noised. Photos are drawn at
    /// random from `images`; transient target tokens carry no loss and
    /// transient condition tokens are replaced by the mask token.
    pub fn build_inpainting_sample(
        &self,
        images: &[Image],
        masks: &[Mask],
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<TaskBatch> {
        if !(MIN_ARITY..=MAX_ARITY).contains(&n) {
            return Err(Error::invalid(format!("inpainting arity {n} outside 2..=5")));
        }
        if images.len() < n + 1 {
            return Err(Error::invalid(format!(
                "inpainting with {n} conditions needs {} images, got {}",
                n + 1,
                images.len()
            )));
        }
        if !masks.is_empty() && masks.len() != images.len() {
            return Err(Error::shape("one transient mask per image expected"));
        }
        let picks = rand::seq::index::sample(rng, images.len(), n + 1).into_vec();
        let mut frames = Vec::with_capacity(n + 1);
        let mut noisy = Vec::with_capacity(n + 1);
        let mut transient = Vec::with_capacity(n + 1);
        let mut appearance = Vec::with_capacity(n + 1);
        for (slot, &j) in picks.iter().enumerate() {
            let target = slot == n;
            let role = if target { FrameRole::Target } else { FrameRole::Condition };
            let mut f = self.encode(&images[j], slot, role)?;
            let tr = self.transient_tokens(masks.get(j), f.tokens())?;
            if target {
                noisy.push(select_inpaint_mask((f.grid_h, f.grid_w), INPAINT_RATIO, rng)?);
            } else {
                f.masked = tr.clone();
                noisy.push(vec![false; f.tokens()]);
            }
            appearance.push(appearance_descriptor(&images[j], self.appearance_dim)?);
            transient.push(tr);
            frames.push(f);
        }
        self.finish(frames, noisy, transient, appearance, Task::Inpainting, rng)
    }

    /// `16(n−1)+1` frames sampled at stride `m` from a random window of the
    /// clip. Every 16th frame is a jittered, possibly region-masked
    /// condition; the rest are fully noised targets.
    #[allow(clippy::too_many_arguments)]
    pub fn build_interpolation_sample(
        &self,
        video: &[Image],
        masks: &[Mask],
        n: usize,
        baseline_multiplier: usize,
        jitter: &JitterStrength,
        condition_mask: (f64, f64),
        rng: &mut impl Rng,
    ) -> Result<TaskBatch> {
        if !(MIN_ARITY..=MAX_ARITY).contains(&n) {
            return Err(Error::invalid(format!("interpolation arity {n} outside 2..=5")));
        }
        let m = baseline_multiplier.max(1);
        let frames_in_seq = FRAME_STRIDE * (n - 1) + 1;
        let span = FRAME_STRIDE * m * (n - 1) + 1;
        if video.len() < span {
            return Err(Error::invalid(format!(
                "clip of {} frames is shorter than the {span}-frame span needed for n={n}, m={m}",
                video.len()
            )));
        }
        if !masks.is_empty() && masks.len() != video.len() {
            return Err(Error::shape("one transient mask per video frame expected"));
        }
        let start = rng.gen_range(0..=video.len() - span);
        let mut frames = Vec::with_capacity(frames_in_seq);
        let mut noisy = Vec::with_capacity(frames_in_seq);
        let mut transient = Vec::with_capacity(frames_in_seq);
        let mut appearance = Vec::with_capacity(frames_in_seq);
        for k in 0..frames_in_seq {
            let src = start + k * m;
            let cond = k % FRAME_STRIDE == 0;
            let tokens;
            if cond {
                let img = color_jitter(&video[src], rng, jitter);
                let f = self.encode(&img, k, FrameRole::Condition)?;
                let mut f = random_condition_mask(&f, rng, condition_mask.0, condition_mask.1);
                let tr = self.transient_tokens(masks.get(src), f.tokens())?;
                for (mk, &t) in f.masked.iter_mut().zip(&tr) {
                    *mk |= t;
                }
                tokens = f.tokens();
                appearance.push(appearance_descriptor(&img, self.appearance_dim)?);
                transient.push(tr);
                frames.push(f);
                noisy.push(vec![false; tokens]);
            } else {
                let f = self.encode(&video[src], k, FrameRole::Target)?;
                tokens = f.tokens();
                appearance.push(appearance_descriptor(&video[src], self.appearance_dim)?);
                transient.push(self.transient_tokens(masks.get(src), tokens)?);
                frames.push(f);
                noisy.push(vec![true; tokens]);
            }
        }
        self.finish(frames, noisy, transient, appearance, Task::Interpolation, rng)
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean squared error over loss-bearing tokens (averaged over their
/// elements), with its gradient. An empty mask gives a zero loss.
pub fn masked_loss_and_grad<T: Real>(pred: &Mat<T>, true_eps: &[f32], loss_mask: &[bool]) -> (T, Mat<T>) {
    assert_eq!(pred.rows, loss_mask.len(), "prediction rows vs loss mask");
    assert_eq!(pred.data.len(), true_eps.len(), "prediction vs target size");
    let dim = pred.cols;
    let count = loss_mask.iter().filter(|&&b| b).count();
    let mut grad = Mat::zeros(pred.rows, dim);
    if count == 0 {
        log::warn!("masked denoising loss called with an empty mask");
        return (T::zero(), grad);
    }
    let inv = T::one() / T::lit((count * dim) as f64);
    let two = T::lit(2.0);
    let mut loss = T::zero();
    for (i, _) in loss_mask.iter().enumerate().filter(|(_, &b)| b) {
        let p = pred.row(i);
        let e = &true_eps[i * dim..(i + 1) * dim];
        let g = grad.row_mut(i);
        for k in 0..dim {
            let d = p[k] - T::lit(e[k] as f64);
            loss += d * d;
            g[k] = two * d * inv;
        }
    }
    (loss * inv, grad)
}

pub fn masked_denoising_loss<T: Real>(pred: &Mat<T>, true_eps: &[f32], loss_mask: &[bool]) -> T {
    masked_loss_and_grad(pred, true_eps, loss_mask).0
}

/// Loss of `weights` on `batch` without updating anything.
pub fn batch_loss(weights: &Weights<f32>, batch: &[TaskBatch]) -> Result<f32> {
    let mut total = 0.0;
    for b in batch {
        let pred = weights.forward(&b.seq)?;
        total += masked_denoising_loss(&pred, &b.true_eps, &b.loss_mask);
    }
    Ok(total / batch.len().max(1) as f32)
}

/// One optimiser update on the mean loss of `batch`.
pub fn train_step(weights: &mut Weights<f32>, batch: &[TaskBatch], opt: &mut AdamW) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0f32;
    let mut grads: Option<Weights<f32>> = None;
    for b in batch {
        let (loss, g) = param_grads(weights, &b.seq, |pred| {
            let (l, mut d) = masked_loss_and_grad(pred, &b.true_eps, &b.loss_mask);
            for v in &mut d.data {
                *v *= scale;
            }
            (l, d)
        })
        .map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step: opt.step },
            other => other,
        })?;
        total += loss * scale;
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
    }
    let grads = grads.expect("non-empty batch");
    if !grads.is_finite() {
        return Err(Error::NonFiniteLoss { step: opt.step });
    }
    opt.update(weights, &grads);
    Ok(total)
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Training loop state. Sample randomness is a pure function of
/// `(seed, step)`, so a resumed run draws the same batches.
pub struct Trainer {
    pub weights: Weights<f32>,
    pub opt: AdamW,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl Trainer {
    pub fn new(weights: Weights<f32>, config: TrainConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(&weights.config, config.optimizer)?;
        Ok(Self {
            weights,
            opt,
            config,
            schedule,
            seed,
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        rng
    }

    /// Batch for optimiser step `step`.
    pub fn draw_batch(&self, data: &TrainingData, step: u64) -> Result<Vec<TaskBatch>> {
        if data.scenes.is_empty() {
            return Err(Error::Dataset("no training scenes".into()));
        }
        let cfg = &self.config;
        let builder = SampleBuilder::new(&self.schedule, self.weights.config.patch_size, self.weights.config.appearance_dim);
        let mut rng = self.step_rng(step);
        let m = cfg.baseline_multiplier;
        (0..cfg.batch_size)
            .map(|_| {
                let inpaint = cfg.task_mix > 0.0 && rng.gen_bool(cfg.task_mix);
                let scene = &data.scenes[rng.gen_range(0..data.scenes.len())];
                // arities the scene can supply
                let fits = |n: usize| {
                    if inpaint {
                        scene.photos.len() > n
                    } else {
                        scene.clip.len() > FRAME_STRIDE * m * (n - 1)
                    }
                };
                let weights: Vec<f64> = (MIN_ARITY..=MAX_ARITY)
                    .map(|n| if fits(n) { cfg.arity_weights[n - MIN_ARITY] } else { 0.0 })
                    .collect();
                let dist = WeightedIndex::new(&weights).map_err(|_| {
                    Error::Dataset(format!(
                        "scene {} cannot supply any enabled arity for {}",
                        scene.id,
                        if inpaint { "inpainting" } else { "interpolation" }
                    ))
                })?;
                let n = MIN_ARITY + dist.sample(&mut rng);
                if inpaint {
                    builder.build_inpainting_sample(&scene.photos, &scene.masks, n, &mut rng)
                } else {
                    builder.build_interpolation_sample(
                        &scene.clip,
                        &scene.clip_masks,
                        n,
                        m,
                        &cfg.jitter,
                        (cfg.condition_mask_prob, cfg.condition_mask_region),
                        &mut rng,
                    )
                }
            })
            .collect()
    }

    /// Draws the next batch and applies one update; returns its loss.
    pub fn train_once(&mut self, data: &TrainingData) -> Result<f32> {
        let batch = self.draw_batch(data, self.step())?;
        train_step(&mut self.weights, &batch, &mut self.opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::schedule::ScheduleKind;
    use crate::tokens::{EmbedWeights, Layout};

    fn gradient_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.gen::<f32>()).collect();
        Image::from_vec(h, w, data).unwrap()
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn inpainting_counts_match() {
        let s = schedule();
        let b = SampleBuilder::new(&s, 4, 8);
        let imgs: Vec<Image> = (0..4).map(|i| gradient_image(32, 32, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = b.build_inpainting_sample(&imgs, &[], 3, &mut rng).unwrap();
        assert_eq!(batch.seq.len(), 256);
        assert_eq!(batch.loss_tokens(), 51);
        assert_eq!(batch.seq.frame_indices, vec![0, 1, 2, 3]);
        assert_eq!(batch.seq.layout, Layout::Inpainting);
        assert_eq!(batch.task, Task::Inpainting);
        // conditions fully clean
        assert!(batch.seq.meta[..192].iter().all(|m| m.clean));
        assert!(b.build_inpainting_sample(&imgs, &[], 4, &mut rng).is_err());
        assert!(b.build_inpainting_sample(&imgs, &[], 1, &mut rng).is_err());
    }

    #[test]
    fn transient_target_tokens_never_bear_loss() {
        let s = schedule();
        let b = SampleBuilder::new(&s, 4, 8);
        let imgs: Vec<Image> = (0..3).map(|i| gradient_image(16, 16, i)).collect();
        let mut masks: Vec<Mask> = (0..3).map(|_| Mask::empty(16, 16)).collect();
        for m in &mut masks {
            for y in 0..8 {
                for x in 0..8 {
                    m.data[y * 16 + x] = true;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let batch = b.build_inpainting_sample(&imgs, &masks, 2, &mut rng).unwrap();
            for (m, &l) in batch.seq.meta.iter().zip(&batch.loss_mask) {
                if l {
                    assert!(!m.clean && !m.transient);
                }
                if m.transient && m.frame < 2 {
                    assert!(m.masked, "transient condition token left unmasked");
                }
            }
            let noisy = batch.seq.meta.iter().filter(|m| !m.clean).count();
            let noisy_transient = batch.seq.meta.iter().filter(|m| !m.clean && m.transient).count();
            assert_eq!(noisy, 13);
            assert_eq!(batch.loss_tokens(), 13 - noisy_transient);
        }
    }

    #[test]
    fn interpolation_layouts() {
        let s = schedule();
        let b = SampleBuilder::new(&s, 4, 8);
        let clip: Vec<Image> = (0..81).map(|i| gradient_image(8, 8, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (n, m, frames, noised) in [(2, 1, 17, 15), (5, 1, 65, 60), (2, 5, 17, 15)] {
            let batch = b
                .build_interpolation_sample(&clip, &[], n, m, &JitterStrength::default(), (0.5, 0.25), &mut rng)
                .unwrap();
            assert_eq!(batch.seq.frame_count(), frames);
            assert_eq!(batch.seq.target_frames().len(), noised);
            assert_eq!(batch.seq.frame_indices, (0..frames).collect::<Vec<_>>());
            assert_eq!(batch.seq.layout, Layout::Interpolation);
            for f in 0..frames {
                let fully_clean = batch.seq.meta[f * 4..(f + 1) * 4].iter().all(|m| m.clean);
                assert_eq!(fully_clean, f % 16 == 0);
            }
        }
        assert!(b
            .build_interpolation_sample(&clip, &[], 3, 5, &JitterStrength::default(), (0.0, 0.0), &mut rng)
            .is_err());
    }

    #[test]
    fn wide_baseline_samples_span_the_stride() {
        // frames encode their clip position in their brightness; recover the
        // sampled positions from the clean target latents
        let s = schedule();
        let b = SampleBuilder::new(&s, 4, 8);
        let clip: Vec<Image> = (0..81).map(|i| Image::filled(4, 4, [i as f32 / 100.0; 3])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = b
            .build_interpolation_sample(&clip, &[], 2, 5, &JitterStrength::NONE, (0.0, 0.0), &mut rng)
            .unwrap();
        let pos: Vec<usize> = (0..17)
            .map(|f| ((batch.x0[f * 48] + 1.0) * 0.5 * 100.0).round() as usize)
            .collect();
        assert_eq!(pos[0], 0);
        assert_eq!(pos[16], 80);
        assert!(pos.windows(2).all(|w| w[1] == w[0] + 5));
    }

    #[test]
    fn jitter_identity_and_range() {
        let img = gradient_image(8, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(color_jitter(&img, &mut rng, &JitterStrength::NONE), img);
        for _ in 0..50 {
            let out = color_jitter(&img, &mut rng, &JitterStrength::default());
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn jitter_changes_channel_means() {
        let img = gradient_image(8, 8, 4);
        let base = img.channel_means();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let changed = (0..1000)
            .filter(|_| color_jitter(&img, &mut rng, &JitterStrength::default()).channel_means() != base)
            .count();
        assert!(changed as f64 / 1000.0 > 0.99);
    }

    #[test]
    fn hue_rotation_keeps_grey() {
        let m = hue_matrix(0.13);
        let g = [0.4f32; 3];
        for r in 0..3 {
            let v: f32 = (0..3).map(|c| m[r][c] * g[c]).sum();
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    fn frame(gh: usize, gw: usize) -> FrameLatent {
        FrameLatent {
            grid_h: gh,
            grid_w: gw,
            dim: 3,
            data: vec![0.5; gh * gw * 3],
            frame_index: 0,
            role: FrameRole::Condition,
            masked: vec![false; gh * gw],
        }
    }

    #[test]
    fn condition_mask_zero_prob_is_identity() {
        let f = frame(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(random_condition_mask(&f, &mut rng, 0.0, 0.25), f);
        }
    }

    #[test]
    fn condition_mask_expected_fraction() {
        let f = frame(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (prob, region) = (0.3, 0.25);
        let draws = 10_000;
        let masked: usize = (0..draws)
            .map(|_| random_condition_mask(&f, &mut rng, prob, region).masked.iter().filter(|&&m| m).count())
            .sum();
        let frac = masked as f64 / (draws * 64) as f64;
        let expect = prob * region;
        assert!((frac - expect).abs() <= 0.05 * expect, "{frac} vs {expect}");
    }

    #[test]
    fn masked_tokens_show_the_mask_token() {
        let f = frame(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_condition_mask(&f, &mut rng, 1.0, 0.5);
        let tgt = FrameLatent {
            frame_index: 16,
            role: FrameRole::Target,
            ..frame(4, 4)
        };
        let desc = appearance_descriptor(&Image::filled(4, 4, [0.5; 3]), 2).unwrap();
        let seq = TokenSequence::assemble(
            &[f.clone(), tgt],
            &[vec![false; 16], vec![true; 16]],
            &[],
            10,
            &[desc.clone(), desc],
        )
        .unwrap();
        let mut e = EmbedWeights::<f64>::zeros(3, 8, 2);
        e.mask_token.data = vec![7.0, -2.0, 0.25];
        let lat = e.effective_latents(&seq);
        for (i, m) in seq.meta.iter().enumerate() {
            if m.masked {
                assert_eq!(lat.row(i), &[7.0, -2.0, 0.25]);
            }
        }
        assert_eq!(f.masked.iter().filter(|&&m| m).count(), 8);
    }

    #[test]
    fn loss_examples() {
        let pred = Mat::<f64>::from_vec(2, 1, vec![0.5, 0.3]);
        let exact = Mat::<f64>::from_vec(2, 1, vec![0.5, 0.25]);
        assert_eq!(masked_denoising_loss(&exact, &[0.5, 0.25], &[true, true]), 0.0);
        assert_eq!(masked_denoising_loss(&pred, &[9.0, 9.0], &[false, false]), 0.0);
        // unmasked positions are ignored exactly
        let a = masked_denoising_loss(&pred, &[0.1, 0.2], &[false, true]);
        let pred2 = Mat::<f64>::from_vec(2, 1, vec![-40.0, 0.3]);
        assert_eq!(a, masked_denoising_loss(&pred2, &[0.1, 0.2], &[false, true]));
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            width: 32,
            depth: 2,
            heads: 2,
            patch_size: 4,
            image_height: 8,
            image_width: 8,
            appearance_dim: 8,
            max_frames: 65,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn non_loss_labels_do_not_change_the_loss() {
        let s = schedule();
        let b = SampleBuilder::new(&s, 4, 8);
        let imgs: Vec<Image> = (0..3).map(|i| gradient_image(8, 8, i)).collect();
        let mut masks: Vec<Mask> = (0..3).map(|_| Mask::empty(8, 8)).collect();
        masks[2].data[0] = true;
        masks[0].data[0] = true;
        masks[1].data[0] = true;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = b.build_inpainting_sample(&imgs, &masks, 2, &mut rng).unwrap();
        let w = Weights::<f32>::init(&tiny_model(), 0).unwrap();
        let base = batch_loss(&w, std::slice::from_ref(&batch)).unwrap();
        let mut mutated = batch.clone();
        for (i, &l) in batch.loss_mask.iter().enumerate() {
            if !l {
                for v in &mut mutated.true_eps[i * 48..(i + 1) * 48] {
                    *v += 3.0;
                }
            }
        }
        assert_eq!(batch_loss(&w, &[mutated]).unwrap(), base);
    }

    #[test]
    fn train_step_reduces_loss_on_a_frozen_batch() {
        let s = schedule();
        let b = SampleBuilder::new(&s, 4, 8);
        let clip: Vec<Image> = (0..17).map(|i| gradient_image(8, 8, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = vec![b
            .build_interpolation_sample(&clip, &[], 2, 1, &JitterStrength::NONE, (0.0, 0.0), &mut rng)
            .unwrap()];
        let mut w = Weights::<f32>::init(&tiny_model(), 0).unwrap();
        let mut opt = AdamW::new(
            &tiny_model(),
            AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
        )
        .unwrap();
        let first = train_step(&mut w, &batch, &mut opt).unwrap();
        for _ in 0..30 {
            train_step(&mut w, &batch, &mut opt).unwrap();
        }
        let last = batch_loss(&w, &batch).unwrap();
        assert!(last < 0.7 * first, "{first} -> {last}");
        assert_eq!(opt.step, 31);
    }

    #[test]
    fn config_rejects_bad_probabilities() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.task_mix = 1.5;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            baseline_multiplier: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
