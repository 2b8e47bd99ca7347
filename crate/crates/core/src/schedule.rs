//! Diffusion-process mathematics: noise schedules, forward noising, and the
//! reverse update rule.
//!
//! Timesteps are 1-based: `t` runs over `1..=T`, and the cumulative product
//! `alpha_bar(0)` is defined as 1. All schedule arithmetic is f64 regardless
//! of what precision a model trains at.

use crate::error::{CoreError, Result};
use ndarray::Array3;

/// Images and feature maps in model space, H x W x C. Images use C = 3 and
/// live in [-1, 1] per channel; feature maps may have any channel count.
pub type LatentImage = Array3<f64>;

/// The supported beta interpolation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

/// Per-step variance controls sigma_t in the reverse update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    /// sigma_t = sqrt(beta_t).
    Beta,
    /// sigma_t = 0; deterministic update, used at t = 1 and in oracle tests.
    Zero,
}

/// Fixed variance schedule: betas plus the derived alpha sequences.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// beta_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// alpha_t = 1 - beta_t for t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas through step t; alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            return Err(CoreError::invalid(format!(
                "timestep {} outside 1..={}",
                t,
                self.len()
            )));
        }
        Ok(())
    }
}

/// Builds a schedule with `t_total` steps and betas interpolated linearly
/// from `beta_start` to `beta_end` inclusive of both endpoints.
pub fn make_schedule(
    t_total: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_total < 1 {
        return Err(CoreError::invalid("step count T must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(CoreError::invalid(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let ScheduleKind::Linear = kind;
    let betas: Vec<f64> = if t_total == 1 {
        vec![beta_start]
    } else {
        (0..t_total)
            .map(|i| {
                let frac = i as f64 / (t_total - 1) as f64;
                beta_start + (beta_end - beta_start) * frac
            })
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_total);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// Default schedule: T = 1000, linear betas 1e-4 -> 0.02.
pub fn default_schedule() -> NoiseSchedule {
    make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).expect("default schedule is valid")
}

/// One forward noising step: sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * z.
pub fn forward_step(
    x_prev: &LatentImage,
    t: usize,
    z: &LatentImage,
    sched: &NoiseSchedule,
) -> Result<LatentImage> {
    sched.check_t(t)?;
    if x_prev.dim() != z.dim() {
        return Err(CoreError::shape("x_prev and z differ in shape"));
    }
    let beta = sched.beta(t);
    let a = (1.0 - beta).sqrt();
    let b = beta.sqrt();
    Ok(x_prev * a + z * b)
}

/// Jump straight to step t: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
pub fn q_sample(
    x0: &LatentImage,
    t: usize,
    eps: &LatentImage,
    sched: &NoiseSchedule,
) -> Result<LatentImage> {
    sched.check_t(t)?;
    if x0.dim() != eps.dim() {
        return Err(CoreError::shape("x0 and eps differ in shape"));
    }
    let abar = sched.alpha_bar(t);
    Ok(x0 * abar.sqrt() + eps * (1.0 - abar).sqrt())
}

/// One reverse update from x_t to x_{t-1} given a noise estimate:
/// (x_t - (1 - alpha_t)/sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * z.
pub fn reverse_step(
    x_t: &LatentImage,
    eps_hat: &LatentImage,
    t: usize,
    z: &LatentImage,
    sigma_mode: SigmaMode,
    sched: &NoiseSchedule,
) -> Result<LatentImage> {
    sched.check_t(t)?;
    if x_t.dim() != eps_hat.dim() || x_t.dim() != z.dim() {
        return Err(CoreError::shape("x_t, eps_hat and z differ in shape"));
    }
    let alpha = sched.alpha(t);
    let abar = sched.alpha_bar(t);
    if abar >= 1.0 {
        return Err(CoreError::numeric(format!(
            "alpha_bar({t}) = 1; noise coefficient is undefined"
        )));
    }
    let noise_coef = (1.0 - alpha) / (1.0 - abar).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let mut out = (x_t - &(eps_hat * noise_coef)) * inv_sqrt_alpha;
    if let SigmaMode::Beta = sigma_mode {
        let sigma = sched.beta(t).sqrt();
        out = out + z * sigma;
    }
    Ok(out)
}
