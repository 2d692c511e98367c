//! DDPM noise schedule, forward noising and the ancestral reverse step.
//!
//! Timesteps are 0-based array indices: level `t` has signal fraction
//! `alpha_bar[t]`, and `reverse_step` at `t` moves a latent from level `t` to
//! level `t - 1` (or to the clean latent when `t == 0`).

use crate::{Error, Result, Tensor};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// The `(T, beta_start, beta_end)` triple the schedule was built from.
    pub fn params(&self) -> (usize, f64, f64) {
        (self.steps(), self.beta_start, self.beta_end)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Diffusion(format!(
                "timestep {t} outside [0, {})",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Posterior standard deviation used by the ancestral sampler.
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        let var = self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]);
        var.sqrt()
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        linear_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// Betas linearly spaced from `beta_start` to `beta_end`, both inclusive.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Diffusion(format!("need at least 2 steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Diffusion(format!(
            "betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let last = (steps - 1) as f64;
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if i == steps - 1 {
                beta_end
            } else {
                beta_start + (beta_end - beta_start) * (i as f64 / last)
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        beta_start,
        beta_end,
        beta,
        alpha,
        alpha_bar,
    })
}

fn same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Diffusion(format!(
            "{what}: shape {:?} does not match {:?}",
            b.shape(),
            a.shape()
        )));
    }
    Ok(())
}

/// Samples `q(z_t | z_0)`: `sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·eps`.
pub fn q_sample(schedule: &NoiseSchedule, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check_t(t)?;
    same_shape("q_sample noise", z0, eps)?;
    let ab = schedule.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// One ancestral DDPM step from level `t` given the predicted noise.
///
/// `noise` must be all zeros at `t == 0`, where the step is deterministic.
pub fn reverse_step(
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    noise: &Tensor,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    same_shape("reverse_step eps_hat", z_t, eps_hat)?;
    same_shape("reverse_step noise", z_t, noise)?;
    if t == 0 && noise.data().iter().any(|&v| v != 0.0) {
        return Err(Error::Diffusion(
            "reverse_step: noise must be zero at t = 0".into(),
        ));
    }
    let inv_sqrt_alpha = 1.0 / schedule.alpha[t].sqrt();
    let eps_coef = schedule.beta[t] / (1.0 - schedule.alpha_bar[t]).sqrt();
    let sigma = schedule.sigma(t);
    let mean = z_t.zip_map(eps_hat, |z, e| inv_sqrt_alpha * (z - eps_coef * e))?;
    if sigma == 0.0 {
        return Ok(mean);
    }
    mean.zip_map(noise, |m, n| m + sigma * n)
}

/// Latent at a known noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}
