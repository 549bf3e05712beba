//! Keyframe-conditioned generation: clean keyframes plus noise-initialised
//! intermediates, denoised jointly with DDIM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Weights;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::linalg::Real;
use crate::schedule::{NoiseSchedule, TimestepSubsequence};
use crate::tasks::{MAX_ARITY, MIN_ARITY};
use crate::tokens::{
    appearance_descriptor, interpolation_frame_indices, mask_to_tokens, FrameLatent, FrameRole, LatentCodec,
    PixelCodec, TokenSequence, FRAME_STRIDE, INTERMEDIATES_PER_PAIR,
};

pub const DEFAULT_STEPS: usize = 50;

/// Pixel latents lie in `[-1, 1]`; clean estimates are clamped to it.
pub const LATENT_BOUND: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub keyframes: Vec<Image>,
    /// One mask per keyframe; transient tokens are replaced by the mask token.
    pub transient_masks: Option<Vec<Mask>>,
    /// Illumination reference; defaults to the first keyframe.
    pub appearance_source: Option<Image>,
    pub steps: usize,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(keyframes: Vec<Image>, seed: u64) -> Self {
        Self {
            keyframes,
            transient_masks: None,
            appearance_source: None,
            steps: DEFAULT_STEPS,
            seed,
        }
    }

    fn validate(&self, max_n: usize) -> Result<()> {
        let n = self.keyframes.len();
        if n < MIN_ARITY || n > max_n {
            return Err(Error::invalid(format!(
                "{n} keyframes given, between {MIN_ARITY} and {max_n} supported"
            )));
        }
        let first = &self.keyframes[0];
        if self.keyframes.iter().any(|k| !k.same_shape(first)) {
            return Err(Error::shape("keyframes differ in size"));
        }
        if let Some(masks) = &self.transient_masks {
            if masks.len() != n {
                return Err(Error::shape(format!("{} masks for {n} keyframes", masks.len())));
            }
            if masks.iter().any(|m| (m.height, m.width) != (first.height, first.width)) {
                return Err(Error::shape("mask size differs from keyframe size"));
            }
        }
        if self.steps == 0 {
            return Err(Error::invalid("at least one sampling step is required"));
        }
        Ok(())
    }

    /// Content hash of everything that determines the output.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.keyframes.len() as u64).to_le_bytes());
        for k in &self.keyframes {
            h.update((k.height as u64).to_le_bytes());
            h.update((k.width as u64).to_le_bytes());
            h.update(k.to_rgb8());
        }
        match &self.transient_masks {
            Some(ms) => {
                h.update([1]);
                for m in ms {
                    h.update(m.data.iter().map(|&b| u8::from(b)).collect::<Vec<_>>());
                }
            }
            None => h.update([0]),
        }
        match &self.appearance_source {
            Some(a) => {
                h.update([1]);
                h.update((a.height as u64).to_le_bytes());
                h.update((a.width as u64).to_le_bytes());
                h.update(a.to_rgb8());
            }
            None => h.update([0]),
        }
        h.update((self.steps as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub request_hash: String,
    pub checkpoint_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub keyframes: usize,
    pub frames: usize,
}

#[derive(Debug, Clone)]
pub struct GeneratedVideo {
    /// Intermediate frames only, `15·(n−1)` of them.
    pub frames: Vec<Image>,
    pub provenance: Provenance,
}

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn weights_hash<T: Real>(weights: &Weights<T>) -> String {
    let mut h = Sha256::new();
    for (name, p) in weights.params() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((p.rows as u64).to_le_bytes());
        h.update((p.cols as u64).to_le_bytes());
        for v in &p.data {
            h.update((v.as_f64() as f32).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// `k = 15·(n−1)`
pub fn output_frames(n: usize) -> usize {
    INTERMEDIATES_PER_PAIR * n.saturating_sub(1)
}

/// Generates the intermediates between `2..=5` keyframes.
pub fn generate(weights: &Weights<f32>, schedule: &NoiseSchedule, request: &GenerationRequest) -> Result<GeneratedVideo> {
    request.validate(MAX_ARITY)?;
    let cfg = &weights.config;
    let first = &request.keyframes[0];
    if (first.height, first.width) != (cfg.image_height, cfg.image_width) {
        return Err(Error::shape(format!(
            "keyframes are {}x{} but the checkpoint expects {}x{}",
            first.height, first.width, cfg.image_height, cfg.image_width
        )));
    }
    let n = request.keyframes.len();
    let p = cfg.patch_size;
    let codec = PixelCodec;
    let source = request.appearance_source.as_ref().unwrap_or(first);
    let target_desc = appearance_descriptor(source, cfg.appearance_dim)?;

    let indices = interpolation_frame_indices(n);
    let mut frames = Vec::with_capacity(indices.len());
    let mut noisy = Vec::with_capacity(indices.len());
    let mut appearance = Vec::with_capacity(indices.len());
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    for &k in &indices {
        if k % FRAME_STRIDE == 0 {
            let key = k / FRAME_STRIDE;
            let mut f = codec.encode(&request.keyframes[key], p)?;
            if let Some(masks) = &request.transient_masks {
                f.masked = mask_to_tokens(&masks[key], p)?;
            }
            f.frame_index = k;
            f.role = FrameRole::Condition;
            noisy.push(vec![false; f.tokens()]);
            appearance.push(appearance_descriptor(&request.keyframes[key], cfg.appearance_dim)?);
            frames.push(f);
        } else {
            let (gh, gw) = (cfg.image_height / p, cfg.image_width / p);
            let dim = codec.latent_dim(p);
            frames.push(FrameLatent {
                grid_h: gh,
                grid_w: gw,
                dim,
                data: vec![0.0; gh * gw * dim],
                frame_index: k,
                role: FrameRole::Target,
                masked: vec![false; gh * gw],
            });
            noisy.push(vec![true; gh * gw]);
            appearance.push(target_desc.clone());
        }
    }
    let sub = TimestepSubsequence::new(schedule.len(), request.steps)?;
    let mut seq = TokenSequence::assemble(&frames, &noisy, &[], sub.steps[0], &appearance)?;
    let dim = seq.dim;
    let noisy_tokens: Vec<usize> = seq.noisy_tokens().collect();

    // independent unit Gaussian noise per token; state carried in f64
    let mut state: Vec<f64> = (0..noisy_tokens.len() * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    for (t, t_prev) in sub.pairs() {
        seq.set_timestep(t);
        for (j, &i) in noisy_tokens.iter().enumerate() {
            for (d, s) in seq.latent_mut(i).iter_mut().zip(&state[j * dim..(j + 1) * dim]) {
                *d = *s as f32;
            }
        }
        let eps = weights.forward(&seq)?;
        let mut eps_hat = Vec::with_capacity(state.len());
        for &i in &noisy_tokens {
            eps_hat.extend(eps.row(i).iter().map(|&v| v as f64));
        }
        state = schedule.ddim_step_clipped(&state, &eps_hat, t, t_prev, LATENT_BOUND)?;
    }
    for (j, &i) in noisy_tokens.iter().enumerate() {
        for (d, s) in seq.latent_mut(i).iter_mut().zip(&state[j * dim..(j + 1) * dim]) {
            *d = *s as f32;
        }
    }
    let out: Vec<Image> = seq
        .target_frames()
        .into_iter()
        .map(|f| codec.decode(&seq.frame_latent(f), p))
        .collect::<Result<_>>()?;
    debug_assert_eq!(out.len(), output_frames(n));
    Ok(GeneratedVideo {
        provenance: Provenance {
            request_hash: request.hash(),
            checkpoint_hash: weights_hash(weights),
            seed: request.seed,
            steps: request.steps,
            keyframes: n,
            frames: out.len(),
        },
        frames: out,
    })
}

/// Windows of at most five keyframes where neighbouring windows share one.
pub fn chain_windows(n: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < n {
        let end = (start + MAX_ARITY).min(n);
        out.push(start..end);
        start = end - 1;
    }
    out
}

/// Any number of keyframes `≥ 2`: consecutive windows of up to five that
/// share one keyframe, concatenated. Window `w` uses seed `seed + w`; every
/// window takes its appearance from the request's source or, by default,
/// the first keyframe of the whole chain.
pub fn generate_chained(
    weights: &Weights<f32>,
    schedule: &NoiseSchedule,
    request: &GenerationRequest,
) -> Result<GeneratedVideo> {
    request.validate(usize::MAX)?;
    let n = request.keyframes.len();
    if n <= MAX_ARITY {
        return generate(weights, schedule, request);
    }
    let source = request
        .appearance_source
        .clone()
        .unwrap_or_else(|| request.keyframes[0].clone());
    let mut frames = Vec::with_capacity(output_frames(n));
    for (w, range) in chain_windows(n).into_iter().enumerate() {
        let sub = GenerationRequest {
            keyframes: request.keyframes[range.clone()].to_vec(),
            transient_masks: request.transient_masks.as_ref().map(|m| m[range.clone()].to_vec()),
            appearance_source: Some(source.clone()),
            steps: request.steps,
            seed: request.seed.wrapping_add(w as u64),
        };
        frames.extend(generate(weights, schedule, &sub)?.frames);
    }
    Ok(GeneratedVideo {
        provenance: Provenance {
            request_hash: request.hash(),
            checkpoint_hash: weights_hash(weights),
            seed: request.seed,
            steps: request.steps,
            keyframes: n,
            frames: frames.len(),
        },
        frames,
    })
}

/// Mean per-pixel RGB distance between two equally long frame lists.
pub fn mean_pixel_l2(a: &[Image], b: &[Image]) -> Result<f64> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| !x.same_shape(y)) {
        return Err(Error::shape("frame lists differ in length or size"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data.chunks_exact(3).zip(y.data.chunks_exact(3)) {
            let d: f64 = (0..3).map(|c| ((p[c] - q[c]) as f64).powi(2)).sum();
            total += d.sqrt();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Output change when keyframes 2 and 3 trade places, same seed.
pub fn reorder_sensitivity(weights: &Weights<f32>, schedule: &NoiseSchedule, request: &GenerationRequest) -> Result<f64> {
    if request.keyframes.len() < 3 {
        return Err(Error::invalid("reorder sensitivity needs at least 3 keyframes"));
    }
    let base = generate(weights, schedule, request)?;
    let mut swapped = request.clone();
    swapped.keyframes.swap(1, 2);
    if let Some(m) = swapped.transient_masks.as_mut() {
        m.swap(1, 2);
    }
    let other = generate(weights, schedule, &swapped)?;
    mean_pixel_l2(&base.frames, &other.frames)
}
