//! Discrete-time forward noising and deterministic DDIM reverse steps.
//!
//! The network predicts the added noise. Only the values handed to these
//! functions are touched, so callers apply them to the noisy tokens alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

/// Forward-process coefficients over `T` training timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(num_steps: usize, kind: ScheduleKind) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::invalid(format!(
                "a schedule needs at least 2 timesteps, got {num_steps}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..num_steps)
                .map(|i| {
                    let f = i as f64 / (num_steps - 1) as f64;
                    LINEAR_BETA_START + f * (LINEAR_BETA_END - LINEAR_BETA_START)
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |i: usize| {
                    let s = (i as f64 / num_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (s * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (0..num_steps)
                    .map(|i| (1.0 - f(i + 1) / f(i)).clamp(1e-8, COSINE_MAX_BETA))
                    .collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of training timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, len: self.len() })
    }

    /// `ᾱ` at `t_prev`, where `None` is the clean endpoint with `ᾱ = 1`.
    fn alpha_bar_prev(&self, t_prev: Option<usize>) -> Result<f64> {
        match t_prev {
            Some(t) => self.alpha_bar(t),
            None => Ok(1.0),
        }
    }

    /// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps`
    pub fn add_noise<T: Real>(&self, x0: &[T], t: usize, eps: &[T]) -> Result<Vec<T>> {
        if x0.len() != eps.len() {
            return Err(Error::shape(format!(
                "x0 has {} values but eps has {}",
                x0.len(),
                eps.len()
            )));
        }
        let ab = self.alpha_bar(t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(&x, &e)| T::lit(a * x.as_f64() + s * e.as_f64()))
            .collect())
    }

    /// Deterministic (η = 0) DDIM update from `t` to `t_prev`.
    ///
    /// `t_prev = None` is the final step and returns the clean estimate.
    pub fn ddim_step<T: Real>(
        &self,
        xt: &[T],
        eps_hat: &[T],
        t: usize,
        t_prev: Option<usize>,
    ) -> Result<Vec<T>> {
        if xt.len() != eps_hat.len() {
            return Err(Error::shape(format!(
                "xt has {} values but eps_hat has {}",
                xt.len(),
                eps_hat.len()
            )));
        }
        let ab_t = self.alpha_bar(t)?;
        if let Some(tp) = t_prev {
            if tp >= t {
                return Err(Error::invalid(format!(
                    "ddim step must go backwards, got {t} -> {tp}"
                )));
            }
        }
        let ab_prev = self.alpha_bar_prev(t_prev)?;
        let (a_t, s_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let (a_p, s_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        Ok(xt
            .iter()
            .zip(eps_hat)
            .map(|(&x, &e)| {
                let (x, e) = (x.as_f64(), e.as_f64());
                let x0_hat = (x - s_t * e) / a_t;
                T::lit(a_p * x0_hat + s_p * e)
            })
            .collect())
    }

    /// DDIM update with the clean estimate clamped to `[-bound, bound]`; the
    /// noise estimate is re-derived from the clamped value.
    pub fn ddim_step_clipped(
        &self,
        xt: &[f64],
        eps_hat: &[f64],
        t: usize,
        t_prev: Option<usize>,
        bound: f64,
    ) -> Result<Vec<f64>> {
        if xt.len() != eps_hat.len() {
            return Err(Error::shape(format!(
                "xt has {} values but eps_hat has {}",
                xt.len(),
                eps_hat.len()
            )));
        }
        if t_prev.is_some_and(|tp| tp >= t) {
            return Err(Error::invalid(format!("ddim step must go backwards from {t}")));
        }
        let ab_t = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar_prev(t_prev)?;
        let (a_t, s_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let (a_p, s_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        Ok(xt
            .iter()
            .zip(eps_hat)
            .map(|(&x, &e)| {
                let x0 = ((x - s_t * e) / a_t).clamp(-bound, bound);
                let e = (x - a_t * x0) / s_t;
                a_p * x0 + s_p * e
            })
            .collect())
    }

    /// Signal-to-noise ratio `ᾱ_t / (1 − ᾱ_t)`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(ab / (1.0 - ab))
    }
}

/// Strictly decreasing timesteps visited by the sampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepSubsequence {
    pub steps: Vec<usize>,
}

impl TimestepSubsequence {
    /// Evenly spaced indices from `T − 1` down to `0` (or just `T − 1` for a
    /// single step).
    pub fn new(num_train_steps: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > num_train_steps {
            return Err(Error::invalid(format!(
                "sampler steps must be in [1, {num_train_steps}], got {steps}"
            )));
        }
        let last = (num_train_steps - 1) as f64;
        let seq = if steps == 1 {
            vec![num_train_steps - 1]
        } else {
            (0..steps)
                .rev()
                .map(|i| (i as f64 * last / (steps - 1) as f64).round() as usize)
                .collect()
        };
        Ok(Self { steps: seq })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(t, t_prev)` pairs; the last pair steps to the clean endpoint.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, Option<usize>)> + '_ {
        self.steps
            .iter()
            .enumerate()
            .map(move |(i, &t)| (t, self.steps.get(i + 1).copied()))
    }
}
