//! Noise schedule and the ε-reparameterizations linking `z_t`, `z_0` and ε̂.
//!
//! `z_t = √ᾱ_t · z_0 + √(1−ᾱ_t) · ε̂`, with `ᾱ_0 = 1` so `t = 0` is clean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpacing {
    Linear,
    /// Linear in `√β`, then squared.
    ScaledLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub spacing: BetaSpacing,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_max: 1000, beta_start: 0.00085, beta_end: 0.012, spacing: BetaSpacing::ScaledLinear }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t_max: usize,
    /// `beta[t]` for `t ∈ 1..=T`; index 0 is unused (0).
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64, spacing: BetaSpacing) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::InvalidArgument("T_max must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!("need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")));
    }
    let frac = |i: usize| if t_max == 1 { 0.0 } else { (i - 1) as f64 / (t_max - 1) as f64 };
    let mut beta = vec![0.0; t_max + 1];
    for (i, b) in beta.iter_mut().enumerate().skip(1) {
        *b = match spacing {
            BetaSpacing::Linear => beta_start + (beta_end - beta_start) * frac(i),
            BetaSpacing::ScaledLinear => {
                let s = beta_start.sqrt() + (beta_end.sqrt() - beta_start.sqrt()) * frac(i);
                s * s
            }
        };
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = vec![1.0; t_max + 1];
    for t in 1..=t_max {
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    Ok(NoiseSchedule { t_max, beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end, cfg.spacing)
    }

    /// `ᾱ` at a real-valued timestep, linearly interpolated between grid points.
    pub fn alpha_bar_at(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.t_max as f64).contains(&t) {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [0, {}]", self.t_max)));
        }
        let lo = t.floor() as usize;
        if lo == self.t_max {
            return Ok(self.alpha_bar[lo]);
        }
        let f = t - lo as f64;
        Ok(self.alpha_bar[lo] * (1.0 - f) + self.alpha_bar[lo + 1] * f)
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))`.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        let ab = self.alpha_bar_at(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// `(1 − √ᾱ_t)/√(1−ᾱ_t)`: the effective epsilon of a point equal to
    /// its own clean image, per unit of `z_t`. Zero at `t = 0`.
    pub fn skip_coefficient(&self, t: f64) -> Result<f64> {
        let (s0, s1) = self.coefficients(t)?;
        Ok(if s1 == 0.0 { 0.0 } else { (1.0 - s0) / s1 })
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [1, {}]", self.t_max)));
        }
        Ok(())
    }

    /// Coefficients `(c_t, c_0)` of `μ = c_t·z_t + c_0·z_0`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let (ab, ab_prev) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
        let denom = 1.0 - ab;
        Ok((self.alpha[t].sqrt() * (1.0 - ab_prev) / denom, ab_prev.sqrt() * self.beta[t] / denom))
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("latent shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(z_t − √ᾱ_t·z_0) / √(1−ᾱ_t)`.
pub fn effective_epsilon(z_t: &Tensor, z_0: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z_t, z_0)?;
    sched.check_step(t)?;
    let (s0, s1) = sched.coefficients(t as f64)?;
    Ok(z_t.zip_map(z_0, |zt, z0| (zt - s0 * z0) / s1))
}

/// `(z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn recover_z0(z_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    recover_z0_at(z_t, eps_hat, t as f64, sched)
}

/// [`recover_z0`] at a real-valued timestep in `[0, T]`.
pub fn recover_z0_at(z_t: &Tensor, eps_hat: &Tensor, t: f64, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z_t, eps_hat)?;
    let (s0, s1) = sched.coefficients(t)?;
    Ok(z_t.zip_map(eps_hat, |zt, e| (zt - s1 * e) / s0))
}

pub fn posterior_mean(z_t: &Tensor, z_0: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z_t, z_0)?;
    let (ct, c0) = sched.posterior_coefficients(t)?;
    Ok(z_t.zip_map(z_0, |a, b| ct * a + c0 * b))
}

/// Differentiable batched recovery with one timestep per batch item.
pub fn recover_z0_var(g: &Graph, z_t: Var, eps_hat: Var, ts: &[f64], sched: &NoiseSchedule) -> Result<Var> {
    let shape = g.shape(z_t);
    if shape[0] != ts.len() {
        return Err(Error::Shape(format!("{} timesteps for a batch of {}", ts.len(), shape[0])));
    }
    let per: usize = shape[1..].iter().product();
    let mut inv_s0 = Vec::with_capacity(per * ts.len());
    let mut ratio = Vec::with_capacity(per * ts.len());
    for &t in ts {
        let (s0, s1) = sched.coefficients(t)?;
        inv_s0.extend(std::iter::repeat_n(1.0 / s0, per));
        ratio.extend(std::iter::repeat_n(-s1 / s0, per));
    }
    let a = g.constant(Tensor::new(&shape, inv_s0)?);
    let b = g.constant(Tensor::new(&shape, ratio)?);
    Ok(g.add(g.mul(z_t, a), g.mul(eps_hat, b)))
}
