//! Helpers shared by the integration tests and the acceptance harness.

#![allow(dead_code)]

use mvdiff::backbone::{param_grads, ModelConfig, Weights};
use mvdiff::image::Image;
use mvdiff::tasks::{masked_denoising_loss, masked_loss_and_grad, TaskBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        width: 16,
        depth: 2,
        heads: 2,
        patch_size: 4,
        image_height: 8,
        image_width: 8,
        appearance_dim: 6,
        max_frames: 17,
        mlp_ratio: 2,
        use_appearance: true,
    }
}

pub fn clip(len: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| Image::from_vec(8, 8, (0..8 * 8 * 3).map(|_| rng.gen()).collect()).unwrap())
        .collect()
}

fn loss(w: &Weights<f64>, b: &TaskBatch) -> f64 {
    masked_denoising_loss(&w.forward(&b.seq).unwrap(), &b.true_eps, &b.loss_mask)
}

/// Compares analytic gradients of the masked loss with central differences
/// on three random entries of every tensor. Returns the number of entries
/// checked and the worst relative error.
pub fn check(batch: &TaskBatch, seed: u64) -> (usize, f64) {
    let mut w = Weights::<f64>::init(&toy_config(), seed).unwrap();
    // nonzero biases and gains so every parameter has a generic gradient
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (_, p) in w.params_mut() {
        for v in &mut p.data {
            *v += 0.05 * (rng.gen::<f64>() - 0.5);
        }
    }
    let (_, grads) = param_grads(&w, &batch.seq, |p| masked_loss_and_grad(p, &batch.true_eps, &batch.loss_mask)).unwrap();

    // a few entries from every tensor
    let mut picks = Vec::new();
    for (ti, (_, p)) in grads.params().iter().enumerate() {
        for _ in 0..3 {
            picks.push((ti, rng.gen_range(0..p.data.len())));
        }
    }
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &(ti, k) in &picks {
        let analytic = grads.params()[ti].1.data[k];
        let orig = w.params()[ti].1.data[k];
        w.params_mut()[ti].1.data[k] = orig + h;
        let up = loss(&w, batch);
        w.params_mut()[ti].1.data[k] = orig - h;
        let down = loss(&w, batch);
        w.params_mut()[ti].1.data[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        let name = &w.params()[ti].0;
        if rel > 1e-3 {
            eprintln!("{name}[{k}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}");
        }
        worst = worst.max(rel);
    }
    (picks.len(), worst)
}

