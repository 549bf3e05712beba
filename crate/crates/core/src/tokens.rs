//! Frames → patch tokens, per-token metadata, and the additive conditioning
//! that turns one flat token list into transformer input.
//!
//! Both training objectives and inference share a single layout: frames are
//! laid out frame-major, tokens row-major inside a frame. Which task a
//! sequence encodes is visible only through which tokens are clean or noisy
//! and which frame indices are present.

use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::linalg::{Mat, Real};

/// Frames between consecutive conditions in an interpolation sequence.
pub const FRAME_STRIDE: usize = 16;
/// Generated frames between each keyframe pair.
pub const INTERMEDIATES_PER_PAIR: usize = FRAME_STRIDE - 1;
/// Fraction of an inpainting target that is noised.
pub const INPAINT_RATIO: f64 = 0.8;
/// Width of the fixed sinusoidal timestep features.
pub const TIME_FEATURES: usize = 64;
/// Raw statistics in an appearance descriptor: 3 means, 3 stds, 3×8 bins.
pub const APPEARANCE_STATS: usize = 30;
pub const HIST_BINS: usize = 8;
const APPEARANCE_PROJECTION_SEED: u64 = 0x00A9_9EA2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRole {
    Condition,
    Target,
}

/// Patch grid of one frame, before the learned input projection.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLatent {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Width of one latent patch vector.
    pub dim: usize,
    /// `grid_h · grid_w · dim`, token-major.
    pub data: Vec<f32>,
    pub frame_index: usize,
    pub role: FrameRole,
    /// Tokens whose content is replaced by the learned mask token.
    pub masked: Vec<bool>,
}

impl FrameLatent {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Rearranges an `H×W×3` image into `(H/p)·(W/p)` flattened `p×p×3` patches.
pub fn patchify(image: &Image, patch: usize) -> Result<FrameLatent> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::shape(format!(
            "patch size {patch} does not divide {}x{}",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let row = (gy * patch + py) * image.width + gx * patch;
                data.extend_from_slice(&image.data[row * 3..(row + patch) * 3]);
            }
        }
    }
    Ok(FrameLatent {
        grid_h: gh,
        grid_w: gw,
        dim,
        data,
        frame_index: 0,
        role: FrameRole::Condition,
        masked: vec![false; gh * gw],
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(frame: &FrameLatent, patch: usize) -> Result<Image> {
    if patch == 0
        || frame.dim != patch * patch * 3
        || frame.data.len() != frame.grid_h * frame.grid_w * frame.dim
    {
        return Err(Error::shape(format!(
            "malformed {}x{} grid of width {} for patch size {patch}",
            frame.grid_h, frame.grid_w, frame.dim
        )));
    }
    let (h, w) = (frame.grid_h * patch, frame.grid_w * patch);
    let mut img = Image::new(h, w);
    for gy in 0..frame.grid_h {
        for gx in 0..frame.grid_w {
            let tok = frame.token(gy * frame.grid_w + gx);
            for py in 0..patch {
                let row = (gy * patch + py) * w + gx * patch;
                img.data[row * 3..(row + patch) * 3]
                    .copy_from_slice(&tok[py * patch * 3..(py + 1) * patch * 3]);
            }
        }
    }
    Ok(img)
}

/// Maps images into the latent patch space the denoiser works in and back.
pub trait LatentCodec: Send + Sync {
    fn latent_dim(&self, patch: usize) -> usize;
    fn encode(&self, image: &Image, patch: usize) -> Result<FrameLatent>;
    fn decode(&self, frame: &FrameLatent, patch: usize) -> Result<Image>;
}

/// Pixel-space codec: patchify, then recentre `[0, 1]` to `[-1, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelCodec;

impl LatentCodec for PixelCodec {
    fn latent_dim(&self, patch: usize) -> usize {
        patch * patch * 3
    }

    fn encode(&self, image: &Image, patch: usize) -> Result<FrameLatent> {
        let mut f = patchify(image, patch)?;
        for v in &mut f.data {
            *v = 2.0 * *v - 1.0;
        }
        Ok(f)
    }

    fn decode(&self, frame: &FrameLatent, patch: usize) -> Result<Image> {
        let mut img = unpatchify(frame, patch)?;
        for v in &mut img.data {
            *v = ((*v + 1.0) * 0.5).clamp(0.0, 1.0);
        }
        Ok(img)
    }
}

/// A patch is transient if any of its pixels is.
pub fn mask_to_tokens(mask: &Mask, patch: usize) -> Result<Vec<bool>> {
    if patch == 0 || mask.height % patch != 0 || mask.width % patch != 0 {
        return Err(Error::shape(format!(
            "patch size {patch} does not divide mask {}x{}",
            mask.height, mask.width
        )));
    }
    let (gh, gw) = (mask.height / patch, mask.width / patch);
    let mut out = vec![false; gh * gw];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                out[(y / patch) * gw + x / patch] = true;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Appearance descriptor
// ---------------------------------------------------------------------------

/// Global colour statistics of one image plus their fixed projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceDescriptor {
    /// Channel means, channel standard deviations, then 8-bin histograms
    /// for R, G and B (fractions of pixels).
    pub stats: [f32; APPEARANCE_STATS],
    pub embedding: Vec<f32>,
}

impl AppearanceDescriptor {
    pub fn channel_means(&self) -> [f32; 3] {
        [self.stats[0], self.stats[1], self.stats[2]]
    }

    pub fn channel_stds(&self) -> [f32; 3] {
        [self.stats[3], self.stats[4], self.stats[5]]
    }
}

fn appearance_projection(dim: usize) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(APPEARANCE_PROJECTION_SEED ^ dim as u64);
    let scale = 1.0 / (APPEARANCE_STATS as f32).sqrt();
    let w = (0..APPEARANCE_STATS * dim)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng) as f32)
        .collect();
    let b = (0..dim)
        .map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng) as f32)
        .collect();
    (w, b)
}

/// Raw descriptor statistics (means, stds, per-channel histograms).
pub fn appearance_stats(image: &Image) -> Result<[f32; APPEARANCE_STATS]> {
    if image.is_empty() {
        return Err(Error::invalid("appearance descriptor of an empty image"));
    }
    let n = image.pixel_count() as f64;
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut hist = [[0usize; HIST_BINS]; 3];
    for px in image.data.chunks_exact(3) {
        for c in 0..3 {
            let v = px[c].clamp(0.0, 1.0) as f64;
            sum[c] += v;
            sq[c] += v * v;
            let bin = ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            hist[c][bin] += 1;
        }
    }
    let mut stats = [0f32; APPEARANCE_STATS];
    for c in 0..3 {
        let mean = sum[c] / n;
        let var = (sq[c] / n - mean * mean).max(0.0);
        stats[c] = mean as f32;
        stats[3 + c] = var.sqrt() as f32;
        for b in 0..HIST_BINS {
            stats[6 + c * HIST_BINS + b] = (hist[c][b] as f64 / n) as f32;
        }
    }
    Ok(stats)
}

/// Deterministic stand-in for a frozen global image embedding: colour
/// statistics passed through a fixed seeded affine map of width `dim`.
pub fn appearance_descriptor(image: &Image, dim: usize) -> Result<AppearanceDescriptor> {
    static CACHE: OnceLock<std::sync::Mutex<Vec<(usize, (Vec<f32>, Vec<f32>))>>> = OnceLock::new();
    let stats = appearance_stats(image)?;
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().expect("projection cache poisoned");
    if !guard.iter().any(|(d, _)| *d == dim) {
        guard.push((dim, appearance_projection(dim)));
    }
    let (w, b) = &guard.iter().find(|(d, _)| *d == dim).expect("just inserted").1;
    let mut embedding = b.clone();
    for (i, s) in stats.iter().enumerate() {
        for (e, wv) in embedding.iter_mut().zip(&w[i * dim..(i + 1) * dim]) {
            *e += s * wv;
        }
    }
    Ok(AppearanceDescriptor { stats, embedding })
}

// ---------------------------------------------------------------------------
// Masks and layouts
// ---------------------------------------------------------------------------

/// Marks exactly `round(ratio · H_p · W_p)` positions, uniformly at random.
pub fn select_inpaint_mask(
    grid: (usize, usize),
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<Vec<bool>> {
    let total = grid.0 * grid.1;
    if total == 0 {
        return Err(Error::invalid("degenerate token grid"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let count = (ratio * total as f64).round() as usize;
    let mut mask = vec![false; total];
    for i in rand::seq::index::sample(rng, total, count) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Frame indices of an inpainting sequence with `n` conditions: `0..=n`.
pub fn inpainting_frame_indices(n: usize) -> Vec<usize> {
    (0..=n).collect()
}

/// Frame indices of an interpolation sequence with `n` keyframes:
/// `0..=16(n−1)`, conditions at multiples of 16.
pub fn interpolation_frame_indices(n: usize) -> Vec<usize> {
    (0..=FRAME_STRIDE * n.saturating_sub(1)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Inpainting,
    Interpolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMeta {
    pub frame: usize,
    pub frame_index: usize,
    pub spatial_index: usize,
    pub clean: bool,
    /// 0 for clean tokens.
    pub timestep: usize,
    pub transient: bool,
    /// Content replaced by the learned mask token.
    pub masked: bool,
}

/// Unified token layout consumed by the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    /// `tokens × dim` latent patch values.
    pub latents: Vec<f32>,
    pub meta: Vec<TokenMeta>,
    /// Frame index of each frame, ascending.
    pub frame_indices: Vec<usize>,
    /// Appearance embedding of each frame's conditioning image.
    pub appearance: Vec<Vec<f32>>,
    pub layout: Layout,
}

impl TokenSequence {
    /// Lays frames out frame-major. `noisy[f][s]` marks noised tokens of frame
    /// `f`; those tokens get timestep `t`, all others timestep 0. `transient`
    /// is per frame and token, and may be empty for frames without masks.
    pub fn assemble(
        frames: &[FrameLatent],
        noisy: &[Vec<bool>],
        transient: &[Vec<bool>],
        t: usize,
        appearance: &[AppearanceDescriptor],
    ) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("sequence without frames"))?;
        if noisy.len() != frames.len()
            || appearance.len() != frames.len()
            || (transient.len() != frames.len() && !transient.is_empty())
        {
            return Err(Error::shape(
                "per-frame metadata does not match the number of frames",
            ));
        }
        let a_dim = appearance[0].embedding.len();
        let (gh, gw, dim) = (first.grid_h, first.grid_w, first.dim);
        let per = gh * gw;
        let mut latents = Vec::with_capacity(frames.len() * per * dim);
        let mut meta = Vec::with_capacity(frames.len() * per);
        let mut frame_indices = Vec::with_capacity(frames.len());
        for (f, frame) in frames.iter().enumerate() {
            if (frame.grid_h, frame.grid_w) != (gh, gw) {
                return Err(Error::shape("frames in one sequence use mixed grid shapes"));
            }
            if frame.dim != dim || appearance[f].embedding.len() != a_dim {
                return Err(Error::shape("inconsistent widths within one sequence"));
            }
            if noisy[f].len() != per
                || frame.masked.len() != per
                || transient.get(f).is_some_and(|m| m.len() != per && !m.is_empty())
            {
                return Err(Error::shape("token flags do not match the grid"));
            }
            if frame_indices.last().is_some_and(|&last| frame.frame_index <= last) {
                return Err(Error::invalid("frame indices must be strictly ascending"));
            }
            frame_indices.push(frame.frame_index);
            latents.extend_from_slice(&frame.data);
            for s in 0..per {
                let clean = !noisy[f][s];
                meta.push(TokenMeta {
                    frame: f,
                    frame_index: frame.frame_index,
                    spatial_index: s,
                    clean,
                    timestep: if clean { 0 } else { t },
                    transient: transient.get(f).and_then(|m| m.get(s)).copied().unwrap_or(false),
                    masked: frame.masked[s],
                });
            }
        }
        let layout = detect_layout(&meta, frames.len(), per).ok_or_else(|| {
            Error::invalid("token flags match neither the inpainting nor the interpolation layout")
        })?;
        Ok(Self {
            grid_h: gh,
            grid_w: gw,
            dim,
            latents,
            meta,
            frame_indices,
            appearance: appearance.iter().map(|a| a.embedding.clone()).collect(),
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn latent(&self, i: usize) -> &[f32] {
        &self.latents[i * self.dim..(i + 1) * self.dim]
    }

    pub fn latent_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.latents[i * self.dim..(i + 1) * self.dim]
    }

    pub fn noisy_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.clean)
            .map(|(i, _)| i)
    }

    /// Sets the timestep carried by every noisy token.
    pub fn set_timestep(&mut self, t: usize) {
        for m in self.meta.iter_mut().filter(|m| !m.clean) {
            m.timestep = t;
        }
    }

    /// Frames with no clean token.
    pub fn target_frames(&self) -> Vec<usize> {
        let per = self.tokens_per_frame();
        (0..self.frame_count())
            .filter(|f| self.meta[f * per..(f + 1) * per].iter().any(|m| !m.clean))
            .collect()
    }

    /// Copies one frame's latent grid out of the sequence.
    pub fn frame_latent(&self, f: usize) -> FrameLatent {
        let per = self.tokens_per_frame();
        FrameLatent {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            dim: self.dim,
            data: self.latents[f * per * self.dim..(f + 1) * per * self.dim].to_vec(),
            frame_index: self.frame_indices[f],
            role: if self.meta[f * per..(f + 1) * per].iter().all(|m| m.clean) {
                FrameRole::Condition
            } else {
                FrameRole::Target
            },
            masked: self.meta[f * per..(f + 1) * per].iter().map(|m| m.masked).collect(),
        }
    }
}

/// Classifies a sequence by its clean/noisy pattern alone.
pub fn detect_layout(meta: &[TokenMeta], frames: usize, per_frame: usize) -> Option<Layout> {
    if frames == 0 || meta.len() != frames * per_frame {
        return None;
    }
    let mut partial = 0;
    let mut fully_noisy = 0;
    for f in 0..frames {
        let noisy = meta[f * per_frame..(f + 1) * per_frame]
            .iter()
            .filter(|m| !m.clean)
            .count();
        if noisy == per_frame {
            fully_noisy += 1;
        } else if noisy > 0 {
            partial += 1;
        }
    }
    match (partial, fully_noisy) {
        (1, 0) => Some(Layout::Inpainting),
        (0, k) if k > 0 && k < frames => Some(Layout::Interpolation),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Learned conditioning
// ---------------------------------------------------------------------------

/// Fixed 2D sine-cosine position table for a `gh × gw` grid.
pub fn position_table<T: Real>(gh: usize, gw: usize, width: usize) -> Mat<T> {
    let mut out = Mat::zeros(gh * gw, width);
    let quarter = width / 4;
    for y in 0..gh {
        for x in 0..gw {
            let row = out.row_mut(y * gw + x);
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter.max(1) as f64);
                let (py, px) = (y as f64 * omega, x as f64 * omega);
                row[i] = T::lit(py.sin());
                row[quarter + i] = T::lit(py.cos());
                row[2 * quarter + i] = T::lit(px.sin());
                row[3 * quarter + i] = T::lit(px.cos());
            }
        }
    }
    out
}

/// Fixed sinusoidal features of a diffusion timestep.
pub fn timestep_features<T: Real>(t: usize) -> [T; TIME_FEATURES] {
    let half = TIME_FEATURES / 2;
    let mut out = [T::zero(); TIME_FEATURES];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = T::lit(arg.sin());
        out[half + i] = T::lit(arg.cos());
    }
    out
}

/// Learned parameters of the conditioning stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedWeights<T> {
    /// Latent patch → width C.
    pub patch_w: Mat<T>,
    pub patch_b: Mat<T>,
    /// Affine map of the raw frame index.
    pub frame_w: Mat<T>,
    pub frame_b: Mat<T>,
    pub appearance_w: Mat<T>,
    pub appearance_b: Mat<T>,
    pub time_w: Mat<T>,
    pub time_b: Mat<T>,
    /// Row 0: noisy, row 1: clean.
    pub flag: Mat<T>,
    /// Learned replacement for masked latent patches.
    pub mask_token: Mat<T>,
}

/// The summands of an assembled token feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    /// Learned patch projection plus the fixed spatial position table.
    Patch,
    FrameIndex,
    Appearance,
    Timestep,
    Flag,
}

impl Term {
    pub const ALL: [Term; 5] = [
        Term::Patch,
        Term::FrameIndex,
        Term::Appearance,
        Term::Timestep,
        Term::Flag,
    ];
}

impl<T: Real> EmbedWeights<T> {
    pub fn zeros(latent_dim: usize, width: usize, appearance_dim: usize) -> Self {
        Self {
            patch_w: Mat::zeros(latent_dim, width),
            patch_b: Mat::zeros(1, width),
            frame_w: Mat::zeros(1, width),
            frame_b: Mat::zeros(1, width),
            appearance_w: Mat::zeros(appearance_dim, width),
            appearance_b: Mat::zeros(1, width),
            time_w: Mat::zeros(TIME_FEATURES, width),
            time_b: Mat::zeros(1, width),
            flag: Mat::zeros(2, width),
            mask_token: Mat::zeros(1, latent_dim),
        }
    }

    pub fn width(&self) -> usize {
        self.patch_w.cols
    }

    pub fn params(&self) -> Vec<(&'static str, &Mat<T>)> {
        vec![
            ("patch.w", &self.patch_w),
            ("patch.b", &self.patch_b),
            ("frame.w", &self.frame_w),
            ("frame.b", &self.frame_b),
            ("appearance.w", &self.appearance_w),
            ("appearance.b", &self.appearance_b),
            ("time.w", &self.time_w),
            ("time.b", &self.time_b),
            ("flag", &self.flag),
            ("mask_token", &self.mask_token),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Mat<T>)> {
        vec![
            ("patch.w", &mut self.patch_w),
            ("patch.b", &mut self.patch_b),
            ("frame.w", &mut self.frame_w),
            ("frame.b", &mut self.frame_b),
            ("appearance.w", &mut self.appearance_w),
            ("appearance.b", &mut self.appearance_b),
            ("time.w", &mut self.time_w),
            ("time.b", &mut self.time_b),
            ("flag", &mut self.flag),
            ("mask_token", &mut self.mask_token),
        ]
    }

    /// `frame_index_embed(i) = i · w + b`
    pub fn frame_index_embed(&self, frame_index: i64) -> Result<Vec<T>> {
        if frame_index < 0 {
            return Err(Error::invalid(format!("negative frame index {frame_index}")));
        }
        let i = T::lit(frame_index as f64);
        Ok(self
            .frame_w
            .data
            .iter()
            .zip(&self.frame_b.data)
            .map(|(&w, &b)| i * w + b)
            .collect())
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.dim != self.patch_w.rows {
            return Err(Error::shape(format!(
                "sequence latent width {} but model expects {}",
                seq.dim, self.patch_w.rows
            )));
        }
        if seq.appearance.iter().any(|a| a.len() != self.appearance_w.rows) {
            return Err(Error::shape(format!(
                "appearance width differs from model width {}",
                self.appearance_w.rows
            )));
        }
        Ok(())
    }

    /// Latents as fed to the patch projection, masked rows replaced.
    pub fn effective_latents(&self, seq: &TokenSequence) -> Mat<T> {
        let mut out = Mat::zeros(seq.len(), seq.dim);
        for (i, m) in seq.meta.iter().enumerate() {
            let row = out.row_mut(i);
            if m.masked {
                row.copy_from_slice(&self.mask_token.data);
            } else {
                for (o, &v) in row.iter_mut().zip(seq.latent(i)) {
                    *o = T::lit(v as f64);
                }
            }
        }
        out
    }

    fn appearance_rows(&self, seq: &TokenSequence) -> Mat<T> {
        let mut out = Mat::zeros(seq.len(), self.appearance_w.rows);
        for (i, m) in seq.meta.iter().enumerate() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(&seq.appearance[m.frame]) {
                *o = T::lit(v as f64);
            }
        }
        out
    }

    fn time_rows(&self, seq: &TokenSequence) -> Mat<T> {
        let mut out = Mat::zeros(seq.len(), TIME_FEATURES);
        for (i, m) in seq.meta.iter().enumerate() {
            out.row_mut(i).copy_from_slice(&timestep_features::<T>(m.timestep));
        }
        out
    }

    /// One summand of the assembled features, `tokens × C`.
    pub fn term(&self, kind: Term, seq: &TokenSequence) -> Result<Mat<T>> {
        self.check(seq)?;
        let (n, c) = (seq.len(), self.width());
        Ok(match kind {
            Term::Patch => {
                let mut out = self.effective_latents(seq).matmul(&self.patch_w);
                out.add_row_vec(&self.patch_b.data);
                let pos = position_table::<T>(seq.grid_h, seq.grid_w, c);
                for (i, m) in seq.meta.iter().enumerate() {
                    for (o, &p) in out.row_mut(i).iter_mut().zip(pos.row(m.spatial_index)) {
                        *o += p;
                    }
                }
                out
            }
            Term::FrameIndex => {
                let mut out = Mat::zeros(n, c);
                for (i, m) in seq.meta.iter().enumerate() {
                    let e = self.frame_index_embed(m.frame_index as i64)?;
                    out.row_mut(i).copy_from_slice(&e);
                }
                out
            }
            Term::Appearance => {
                let mut out = self.appearance_rows(seq).matmul(&self.appearance_w);
                out.add_row_vec(&self.appearance_b.data);
                out
            }
            Term::Timestep => {
                let mut out = self.time_rows(seq).matmul(&self.time_w);
                out.add_row_vec(&self.time_b.data);
                out
            }
            Term::Flag => {
                let mut out = Mat::zeros(n, c);
                for (i, m) in seq.meta.iter().enumerate() {
                    out.row_mut(i).copy_from_slice(self.flag.row(usize::from(m.clean)));
                }
                out
            }
        })
    }

    /// Sum of the enabled conditioning terms.
    pub fn assemble(&self, seq: &TokenSequence, use_appearance: bool) -> Result<Mat<T>> {
        let mut out = self.term(Term::Patch, seq)?;
        for kind in [Term::FrameIndex, Term::Appearance, Term::Timestep, Term::Flag] {
            if kind == Term::Appearance && !use_appearance {
                continue;
            }
            out.add_assign(&self.term(kind, seq)?);
        }
        Ok(out)
    }

    /// Accumulates parameter gradients given `d loss / d features`.
    pub fn backward(
        &self,
        seq: &TokenSequence,
        d_features: &Mat<T>,
        use_appearance: bool,
        grads: &mut EmbedWeights<T>,
    ) {
        use crate::linalg::gemm;
        let lat = self.effective_latents(seq);
        gemm(T::one(), lat.view().t(), d_features.view(), T::one(), grads.patch_w.view_mut());
        d_features.col_sums_into(&mut grads.patch_b.data);

        // masked rows route their gradient to the mask token
        let mut d_lat = Mat::zeros(1, seq.dim);
        let mut any_masked = false;
        for (i, m) in seq.meta.iter().enumerate() {
            if !m.masked {
                continue;
            }
            any_masked = true;
            let row = d_features.row(i);
            for (k, out) in d_lat.data.iter_mut().enumerate() {
                let w = self.patch_w.row(k);
                *out += row.iter().zip(w).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        if any_masked {
            grads.mask_token.add_assign(&d_lat);
        }

        for (i, m) in seq.meta.iter().enumerate() {
            let idx = T::lit(m.frame_index as f64);
            for (g, &d) in grads.frame_w.data.iter_mut().zip(d_features.row(i)) {
                *g += idx * d;
            }
            for (g, &d) in grads.flag.row_mut(usize::from(m.clean)).iter_mut().zip(d_features.row(i)) {
                *g += d;
            }
        }
        d_features.col_sums_into(&mut grads.frame_b.data);

        if use_appearance {
            let a = self.appearance_rows(seq);
            gemm(T::one(), a.view().t(), d_features.view(), T::one(), grads.appearance_w.view_mut());
            d_features.col_sums_into(&mut grads.appearance_b.data);
        }

        let tf = self.time_rows(seq);
        gemm(T::one(), tf.view().t(), d_features.view(), T::one(), grads.time_w.view_mut());
        d_features.col_sums_into(&mut grads.time_b.data);
    }
}
