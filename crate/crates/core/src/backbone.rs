//! The denoiser: a pre-norm transformer with full self-attention over every
//! token of every frame, predicting per-token noise in latent patch space.
//!
//! Forward and backward passes are written out by hand. The same code runs
//! in `f32` for training and in `f64` for gradient checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, softmax_rows, Mat, Real, View, ViewMut};
use crate::tokens::{EmbedWeights, TokenSequence};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub appearance_dim: usize,
    pub max_frames: usize,
    pub mlp_ratio: usize,
    /// Disable to ablate the appearance conditioning pathway.
    pub use_appearance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 256,
            depth: 8,
            heads: 8,
            patch_size: 4,
            image_height: 32,
            image_width: 32,
            appearance_dim: 32,
            max_frames: 65,
            mlp_ratio: 4,
            use_appearance: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("width, depth, heads and mlp_ratio must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.width % 4 != 0 {
            return bad(format!("width {} must be a multiple of 4", self.width));
        }
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return bad(format!(
                "patch size {} must divide {}x{}",
                self.patch_size, self.image_height, self.image_width
            ));
        }
        if self.appearance_dim == 0 || self.max_frames < 2 {
            return bad("appearance_dim must be positive and max_frames at least 2".into());
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Mat<T>,
    pub ln1_b: Mat<T>,
    pub qkv_w: Mat<T>,
    pub qkv_b: Mat<T>,
    pub out_w: Mat<T>,
    pub out_b: Mat<T>,
    pub ln2_g: Mat<T>,
    pub ln2_b: Mat<T>,
    pub fc1_w: Mat<T>,
    pub fc1_b: Mat<T>,
    pub fc2_w: Mat<T>,
    pub fc2_b: Mat<T>,
}

impl<T: Real> Block<T> {
    fn zeros(c: usize, hidden: usize) -> Self {
        Self {
            ln1_g: Mat::zeros(1, c),
            ln1_b: Mat::zeros(1, c),
            qkv_w: Mat::zeros(c, 3 * c),
            qkv_b: Mat::zeros(1, 3 * c),
            out_w: Mat::zeros(c, c),
            out_b: Mat::zeros(1, c),
            ln2_g: Mat::zeros(1, c),
            ln2_b: Mat::zeros(1, c),
            fc1_w: Mat::zeros(c, hidden),
            fc1_b: Mat::zeros(1, hidden),
            fc2_w: Mat::zeros(hidden, c),
            fc2_b: Mat::zeros(1, c),
        }
    }

    fn params(&self) -> [(&'static str, &Mat<T>); 12] {
        [
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("attn.qkv.w", &self.qkv_w),
            ("attn.qkv.b", &self.qkv_b),
            ("attn.out.w", &self.out_w),
            ("attn.out.b", &self.out_b),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("mlp.fc1.w", &self.fc1_w),
            ("mlp.fc1.b", &self.fc1_b),
            ("mlp.fc2.w", &self.fc2_w),
            ("mlp.fc2.b", &self.fc2_b),
        ]
    }

    fn params_mut(&mut self) -> [(&'static str, &mut Mat<T>); 12] {
        [
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("attn.qkv.w", &mut self.qkv_w),
            ("attn.qkv.b", &mut self.qkv_b),
            ("attn.out.w", &mut self.out_w),
            ("attn.out.b", &mut self.out_b),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
            ("mlp.fc1.w", &mut self.fc1_w),
            ("mlp.fc1.b", &mut self.fc1_b),
            ("mlp.fc2.w", &mut self.fc2_w),
            ("mlp.fc2.b", &mut self.fc2_b),
        ]
    }
}

/// All learned tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub config: ModelConfig,
    pub embed: EmbedWeights<T>,
    pub blocks: Vec<Block<T>>,
    pub final_g: Mat<T>,
    pub final_b: Mat<T>,
    pub head_w: Mat<T>,
    pub head_b: Mat<T>,
}

impl<T: Real> Weights<T> {
    /// All-zero tensors with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (c, l) = (config.width, config.latent_dim());
        let hidden = c * config.mlp_ratio;
        Ok(Self {
            config: config.clone(),
            embed: EmbedWeights::zeros(l, c, config.appearance_dim),
            blocks: (0..config.depth).map(|_| Block::zeros(c, hidden)).collect(),
            final_g: Mat::zeros(1, c),
            final_b: Mat::zeros(1, c),
            head_w: Mat::zeros(c, l),
            head_b: Mat::zeros(1, l),
        })
    }

    /// Seeded initialisation.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |m: &mut Mat<T>, std: f64| {
            for v in &mut m.data {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = T::lit(std * z);
            }
        };
        let c = config.width as f64;
        let l = config.latent_dim() as f64;
        let hidden = c * config.mlp_ratio as f64;
        let resid = 1.0 / (2.0 * config.depth as f64).sqrt();

        fill(&mut w.embed.patch_w, 1.0 / l.sqrt());
        fill(&mut w.embed.frame_w, 0.02);
        fill(&mut w.embed.appearance_w, 1.0 / (config.appearance_dim as f64).sqrt());
        fill(&mut w.embed.time_w, 1.0 / (crate::tokens::TIME_FEATURES as f64).sqrt());
        fill(&mut w.embed.flag, 0.5);
        fill(&mut w.embed.mask_token, 0.5);
        for b in &mut w.blocks {
            b.ln1_g.data.fill(T::one());
            b.ln2_g.data.fill(T::one());
            fill(&mut b.qkv_w, 1.0 / c.sqrt());
            fill(&mut b.out_w, resid / c.sqrt());
            fill(&mut b.fc1_w, 1.0 / c.sqrt());
            fill(&mut b.fc2_w, resid / hidden.sqrt());
        }
        w.final_g.data.fill(T::one());
        fill(&mut w.head_w, 0.5 / c.sqrt());
        Ok(w)
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Mat<T>)> {
        let mut out: Vec<(String, &Mat<T>)> = self
            .embed
            .params()
            .into_iter()
            .map(|(n, p)| (format!("embed.{n}"), p))
            .collect();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.params().into_iter().map(|(n, p)| (format!("blocks.{i}.{n}"), p)));
        }
        out.push(("final_norm.g".into(), &self.final_g));
        out.push(("final_norm.b".into(), &self.final_b));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out: Vec<(String, &mut Mat<T>)> = self
            .embed
            .params_mut()
            .into_iter()
            .map(|(n, p)| (format!("embed.{n}"), p))
            .collect();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.params_mut()
                    .into_iter()
                    .map(|(n, p)| (format!("blocks.{i}.{n}"), p)),
            );
        }
        out.push(("final_norm.g".into(), &mut self.final_g));
        out.push(("final_norm.b".into(), &mut self.final_b));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|(_, p)| p.data.iter().all(|v| v.is_finite()))
    }

    /// Same values in another precision.
    pub fn cast<U: Real>(&self) -> Weights<U> {
        let mut out = Weights::<U>::zeros(&self.config).expect("config already validated");
        for ((_, dst), (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d = U::lit(s.as_f64());
            }
        }
        out
    }

    pub fn scale(&mut self, k: T) {
        for (_, p) in self.params_mut() {
            for v in &mut p.data {
                *v *= k;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Weights<T>) {
        for ((_, a), (_, b)) in self.params_mut().into_iter().zip(other.params()) {
            a.add_assign(b);
        }
    }

    /// Global L2 norm over all tensors.
    pub fn norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|(_, p)| p.data.iter())
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        let cfg = &self.config;
        if seq.dim != cfg.latent_dim() {
            return Err(Error::shape(format!(
                "token width {} but model expects {}",
                seq.dim,
                cfg.latent_dim()
            )));
        }
        if seq.frame_count() > cfg.max_frames {
            return Err(Error::invalid(format!(
                "sequence of {} frames exceeds the {}-frame limit",
                seq.frame_count(),
                cfg.max_frames
            )));
        }
        Ok(())
    }

    /// Per-token noise prediction, `tokens × latent_dim`.
    pub fn forward(&self, seq: &TokenSequence) -> Result<Mat<T>> {
        self.check(seq)?;
        let mut x = self.embed.assemble(seq, self.config.use_appearance)?;
        for b in &self.blocks {
            x = block_forward(&self.config, b, x, None);
        }
        let (hf, _, _) = layer_norm(&x, &self.final_g, &self.final_b);
        Ok(linear(&hf, &self.head_w, &self.head_b))
    }

    /// Forward pass that keeps the activations needed by [`Self::backward`].
    pub fn forward_train(&self, seq: &TokenSequence) -> Result<(Mat<T>, ForwardCache<T>)> {
        self.check(seq)?;
        let mut x = self.embed.assemble(seq, self.config.use_appearance)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut cache = None;
            x = block_forward(&self.config, b, x, Some(&mut cache));
            caches.push(cache.expect("cache requested"));
        }
        let (hf, xhat, rstd) = layer_norm(&x, &self.final_g, &self.final_b);
        let y = linear(&hf, &self.head_w, &self.head_b);
        Ok((
            y,
            ForwardCache {
                blocks: caches,
                final_xhat: xhat,
                final_rstd: rstd,
                final_h: hf,
            },
        ))
    }

    /// Gradients of a scalar loss given `d loss / d prediction`.
    pub fn backward(
        &self,
        seq: &TokenSequence,
        cache: &ForwardCache<T>,
        d_out: &Mat<T>,
    ) -> Result<Weights<T>> {
        let mut g = Weights::zeros(&self.config)?;
        let d_hf = linear_backward(&cache.final_h, &self.head_w, d_out, &mut g.head_w, &mut g.head_b);
        let mut dx = layer_norm_backward(
            &d_hf,
            &cache.final_xhat,
            &cache.final_rstd,
            &self.final_g,
            &mut g.final_g,
            &mut g.final_b,
        );
        for ((b, c), gb) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(g.blocks.iter_mut())
            .rev()
        {
            dx = block_backward(&self.config, b, c, dx, gb);
        }
        self.embed
            .backward(seq, &dx, self.config.use_appearance, &mut g.embed);
        Ok(g)
    }
}

/// Gradients of `loss_fn(prediction)` with respect to every parameter.
///
/// `loss_fn` returns the loss and its gradient with respect to the prediction.
pub fn param_grads<T: Real>(
    weights: &Weights<T>,
    seq: &TokenSequence,
    loss_fn: impl FnOnce(&Mat<T>) -> (T, Mat<T>),
) -> Result<(T, Weights<T>)> {
    let (pred, cache) = weights.forward_train(seq)?;
    let (loss, d_pred) = loss_fn(&pred);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let grads = weights.backward(seq, &cache, &d_pred)?;
    Ok((loss, grads))
}

pub struct BlockCache<T> {
    ln1_xhat: Mat<T>,
    ln1_rstd: Vec<T>,
    h1: Mat<T>,
    qkv: Mat<T>,
    probs: Vec<Mat<T>>,
    attn: Mat<T>,
    ln2_xhat: Mat<T>,
    ln2_rstd: Vec<T>,
    h2: Mat<T>,
    pre_act: Mat<T>,
    act: Mat<T>,
}

pub struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
    final_xhat: Mat<T>,
    final_rstd: Vec<T>,
    final_h: Mat<T>,
}

fn linear<T: Real>(x: &Mat<T>, w: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut y = Mat::zeros(x.rows, w.cols);
    gemm(T::one(), x.view(), w.view(), T::zero(), y.view_mut());
    y.add_row_vec(&b.data);
    y
}

/// Accumulates `dW`, `db` and returns `dx`.
fn linear_backward<T: Real>(
    x: &Mat<T>,
    w: &Mat<T>,
    dy: &Mat<T>,
    dw: &mut Mat<T>,
    db: &mut Mat<T>,
) -> Mat<T> {
    gemm(T::one(), x.view().t(), dy.view(), T::one(), dw.view_mut());
    dy.col_sums_into(&mut db.data);
    let mut dx = Mat::zeros(dy.rows, w.rows);
    gemm(T::one(), dy.view(), w.view().t(), T::zero(), dx.view_mut());
    dx
}

fn layer_norm<T: Real>(x: &Mat<T>, g: &Mat<T>, b: &Mat<T>) -> (Mat<T>, Mat<T>, Vec<T>) {
    let c = x.cols;
    let inv_c = T::one() / T::lit(c as f64);
    let eps = T::lit(LN_EPS);
    let mut out = Mat::zeros(x.rows, c);
    let mut xhat = Mat::zeros(x.rows, c);
    let mut rstds = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rstd = T::one() / (var + eps).sqrt();
        rstds.push(rstd);
        let xh = xhat.row_mut(r);
        for (k, &v) in row.iter().enumerate() {
            xh[k] = (v - mean) * rstd;
        }
        let o = out.row_mut(r);
        for k in 0..c {
            o[k] = xhat.data[r * c + k] * g.data[k] + b.data[k];
        }
    }
    (out, xhat, rstds)
}

fn layer_norm_backward<T: Real>(
    dy: &Mat<T>,
    xhat: &Mat<T>,
    rstd: &[T],
    g: &Mat<T>,
    dg: &mut Mat<T>,
    db: &mut Mat<T>,
) -> Mat<T> {
    let c = dy.cols;
    let inv_c = T::one() / T::lit(c as f64);
    let mut dx = Mat::zeros(dy.rows, c);
    let mut dxhat = vec![T::zero(); c];
    for r in 0..dy.rows {
        let (dyr, xr) = (dy.row(r), xhat.row(r));
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for k in 0..c {
            dg.data[k] += dyr[k] * xr[k];
            db.data[k] += dyr[k];
            dxhat[k] = dyr[k] * g.data[k];
            mean_d += dxhat[k];
            mean_dx += dxhat[k] * xr[k];
        }
        mean_d *= inv_c;
        mean_dx *= inv_c;
        let out = dx.row_mut(r);
        for k in 0..c {
            out[k] = rstd[r] * (dxhat[k] - mean_d - xr[k] * mean_dx);
        }
    }
    dx
}

#[inline]
fn gelu<T: Real>(u: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    half * u * (T::one() + (k * (u + c * u * u * u)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(u: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    let th = (k * (u + c * u * u * u)).tanh();
    half * (T::one() + th) + half * u * (T::one() - th * th) * k * (T::one() + T::lit(3.0) * c * u * u)
}

fn block_forward<T: Real>(
    cfg: &ModelConfig,
    b: &Block<T>,
    mut x: Mat<T>,
    cache: Option<&mut Option<BlockCache<T>>>,
) -> Mat<T> {
    let n = x.rows;
    let c = cfg.width;
    let dh = cfg.head_dim();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let keep = cache.is_some();

    let (h1, ln1_xhat, ln1_rstd) = layer_norm(&x, &b.ln1_g, &b.ln1_b);
    let qkv = linear(&h1, &b.qkv_w, &b.qkv_b);
    let mut attn = Mat::zeros(n, c);
    let mut probs = Vec::new();
    let mut scores = Mat::zeros(n, n);
    for hd in 0..cfg.heads {
        let q = View::new(&qkv.data, hd * dh, n, dh, 3 * c, 1);
        let k = View::new(&qkv.data, c + hd * dh, n, dh, 3 * c, 1);
        let v = View::new(&qkv.data, 2 * c + hd * dh, n, dh, 3 * c, 1);
        gemm(scale, q, k.t(), T::zero(), scores.view_mut());
        softmax_rows(&mut scores);
        gemm(
            T::one(),
            scores.view(),
            v,
            T::zero(),
            ViewMut::new(&mut attn.data, hd * dh, n, dh, c, 1),
        );
        if keep {
            probs.push(scores.clone());
        }
    }
    let a = linear(&attn, &b.out_w, &b.out_b);
    x.add_assign(&a);

    let (h2, ln2_xhat, ln2_rstd) = layer_norm(&x, &b.ln2_g, &b.ln2_b);
    let pre_act = linear(&h2, &b.fc1_w, &b.fc1_b);
    let mut act = pre_act.clone();
    for v in &mut act.data {
        *v = gelu(*v);
    }
    let m = linear(&act, &b.fc2_w, &b.fc2_b);
    x.add_assign(&m);

    if let Some(slot) = cache {
        *slot = Some(BlockCache {
            ln1_xhat,
            ln1_rstd,
            h1,
            qkv,
            probs,
            attn,
            ln2_xhat,
            ln2_rstd,
            h2,
            pre_act,
            act,
        });
    }
    x
}

fn block_backward<T: Real>(
    cfg: &ModelConfig,
    b: &Block<T>,
    cache: &BlockCache<T>,
    mut dx: Mat<T>,
    g: &mut Block<T>,
) -> Mat<T> {
    let n = dx.rows;
    let c = cfg.width;
    let dh = cfg.head_dim();
    let scale = T::one() / T::lit(dh as f64).sqrt();

    // MLP branch
    let mut d_act = linear_backward(&cache.act, &b.fc2_w, &dx, &mut g.fc2_w, &mut g.fc2_b);
    for (d, &u) in d_act.data.iter_mut().zip(&cache.pre_act.data) {
        *d *= gelu_grad(u);
    }
    let d_h2 = linear_backward(&cache.h2, &b.fc1_w, &d_act, &mut g.fc1_w, &mut g.fc1_b);
    dx.add_assign(&layer_norm_backward(
        &d_h2,
        &cache.ln2_xhat,
        &cache.ln2_rstd,
        &b.ln2_g,
        &mut g.ln2_g,
        &mut g.ln2_b,
    ));

    // attention branch
    let d_attn = linear_backward(&cache.attn, &b.out_w, &dx, &mut g.out_w, &mut g.out_b);
    let mut d_qkv = Mat::zeros(n, 3 * c);
    let mut d_p = Mat::zeros(n, n);
    for hd in 0..cfg.heads {
        let p = &cache.probs[hd];
        let q = View::new(&cache.qkv.data, hd * dh, n, dh, 3 * c, 1);
        let k = View::new(&cache.qkv.data, c + hd * dh, n, dh, 3 * c, 1);
        let v = View::new(&cache.qkv.data, 2 * c + hd * dh, n, dh, 3 * c, 1);
        let d_o = View::new(&d_attn.data, hd * dh, n, dh, c, 1);
        gemm(T::one(), d_o, v.t(), T::zero(), d_p.view_mut());
        gemm(
            T::one(),
            p.view().t(),
            d_o,
            T::zero(),
            ViewMut::new(&mut d_qkv.data, 2 * c + hd * dh, n, dh, 3 * c, 1),
        );
        // softmax backward, in place: dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for r in 0..n {
            let pr = p.row(r);
            let dr = d_p.row_mut(r);
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pv) in dr.iter_mut().zip(pr) {
                *d = pv * (*d - dot);
            }
        }
        gemm(
            scale,
            d_p.view(),
            k,
            T::zero(),
            ViewMut::new(&mut d_qkv.data, hd * dh, n, dh, 3 * c, 1),
        );
        gemm(
            scale,
            d_p.view().t(),
            q,
            T::zero(),
            ViewMut::new(&mut d_qkv.data, c + hd * dh, n, dh, 3 * c, 1),
        );
    }
    let d_h1 = linear_backward(&cache.h1, &b.qkv_w, &d_qkv, &mut g.qkv_w, &mut g.qkv_b);
    dx.add_assign(&layer_norm_backward(
        &d_h1,
        &cache.ln1_xhat,
        &cache.ln1_rstd,
        &b.ln1_g,
        &mut g.ln1_g,
        &mut g.ln1_b,
    ));
    dx
}
