//! Noise schedules: the alpha/alpha-bar/beta/beta-tilde sequences that every
//! diffusion operation reads its coefficients from.
//!
//! The schedule is parameterized internally by the cumulative retention
//! `alpha_bar`; `beta` is derived from consecutive ratios so the arrays can
//! never drift apart. Timesteps are 1-based (`t = 1..=T`) with the sentinel
//! `alpha_bar[0] = 1`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::fmt_f64;

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
const COSINE_BETA_MAX: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `beta_t` interpolated linearly from `beta_start` to `beta_end`.
    Linear,
    /// `sqrt(beta_t)` interpolated linearly, then squared.
    Quadratic,
    /// `alpha_bar` follows a squared-cosine ramp; betas are derived and
    /// clipped at 0.999.
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
            ScheduleKind::Quadratic => write!(f, "quadratic"),
            ScheduleKind::Cosine => write!(f, "cosine"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cosine_offset: f64,
}

impl ScheduleSpec {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Linear,
            timesteps,
            beta_start,
            beta_end,
            cosine_offset: DEFAULT_COSINE_OFFSET,
        }
    }

    pub fn quadratic(timesteps: usize, beta_start: f64, beta_end: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Quadratic,
            timesteps,
            beta_start,
            beta_end,
            cosine_offset: DEFAULT_COSINE_OFFSET,
        }
    }

    pub fn cosine(timesteps: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cosine,
            timesteps,
            beta_start: 1e-4,
            beta_end: 0.02,
            cosine_offset: DEFAULT_COSINE_OFFSET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::InvalidSpec("schedule needs at least one timestep".into()));
        }
        match self.kind {
            ScheduleKind::Linear | ScheduleKind::Quadratic => {
                if !(self.beta_start > 0.0
                    && self.beta_start <= self.beta_end
                    && self.beta_end < 1.0)
                {
                    return Err(Error::InvalidSpec(format!(
                        "need 0 < beta_start <= beta_end < 1, got [{}, {}]",
                        self.beta_start, self.beta_end
                    )));
                }
            }
            ScheduleKind::Cosine => {
                if !(self.cosine_offset > 0.0) {
                    return Err(Error::InvalidSpec(format!(
                        "cosine offset must be positive, got {}",
                        self.cosine_offset
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Immutable coefficient table for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    alpha: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    beta_tilde: Vec<f64>,
}

/// Constructs the schedule described by `spec`.
pub fn build_schedule(spec: &ScheduleSpec) -> Result<NoiseSchedule> {
    spec.validate()?;
    let t_max = spec.timesteps;
    let beta: Vec<f64> = match spec.kind {
        ScheduleKind::Linear => (1..=t_max).map(|t| interp(spec, t)).collect(),
        ScheduleKind::Quadratic => {
            let sqrt_spec = ScheduleSpec {
                beta_start: spec.beta_start.sqrt(),
                beta_end: spec.beta_end.sqrt(),
                ..*spec
            };
            (1..=t_max)
                .map(|t| {
                    let s = interp(&sqrt_spec, t);
                    s * s
                })
                .collect()
        }
        ScheduleKind::Cosine => cosine_betas(t_max, spec.cosine_offset),
    };

    for (i, &b) in beta.iter().enumerate() {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "derived beta[{}] = {b} lies outside (0, 1)",
                i + 1
            )));
        }
    }

    let mut alpha = Vec::with_capacity(t_max);
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    for &b in &beta {
        let a = 1.0 - b;
        alpha_bar.push(alpha_bar.last().unwrap() * a);
        alpha.push(a);
    }

    let mut beta_tilde = Vec::with_capacity(t_max);
    // The t = 1 posterior has zero variance: alpha_bar[0] = 1 kills the
    // numerator, matching the convention that the last denoising step adds
    // no noise.
    beta_tilde.push(0.0);
    for t in 2..=t_max {
        beta_tilde.push((1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t - 1]);
    }

    Ok(NoiseSchedule {
        spec: *spec,
        alpha,
        alpha_bar,
        beta,
        beta_tilde,
    })
}

fn interp(spec: &ScheduleSpec, t: usize) -> f64 {
    if spec.timesteps == 1 {
        return spec.beta_start;
    }
    let frac = (t - 1) as f64 / (spec.timesteps - 1) as f64;
    spec.beta_start + frac * (spec.beta_end - spec.beta_start)
}

fn cosine_betas(t_max: usize, offset: f64) -> Vec<f64> {
    let f = |u: f64| {
        let arg = (u + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
        arg.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut prev_bar = 1.0;
    let mut betas = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let bar = f(t as f64 / t_max as f64) / f0;
        let beta = (1.0 - bar / prev_bar).min(COSINE_BETA_MAX);
        // Clipping redefines alpha_bar at this step; carry the clipped value
        // forward so alpha_bar stays the exact cumulative product.
        prev_bar *= 1.0 - beta;
        betas.push(beta);
    }
    betas
}

impl NoiseSchedule {
    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn kind(&self) -> ScheduleKind {
        self.spec.kind
    }

    pub fn timesteps(&self) -> usize {
        self.spec.timesteps
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::TimestepOutOfRange {
                t,
                t_max: self.timesteps(),
            });
        }
        Ok(())
    }

    /// `alpha_t`, 1-based.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar_t`, valid for `t = 0..=T` with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `beta_t`, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Posterior variance `beta_tilde_t`, 1-based; zero at `t = 1`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    /// Per-step sampling noise scale `sigma_t = sqrt(eta * beta_tilde_t)`.
    /// `eta = 0` is the deterministic case; `eta = 1` recovers the DDPM
    /// posterior standard deviation.
    pub fn sigma(&self, t: usize, eta: f64) -> Result<f64> {
        self.check_t(t)?;
        if !(eta >= 0.0) {
            return Err(Error::InvalidSpec(format!("eta must be >= 0, got {eta}")));
        }
        Ok((eta * self.beta_tilde(t)).sqrt())
    }

    /// CSV table `t,alpha,alpha_bar,beta,beta_tilde`, one row per timestep,
    /// full double precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,alpha,alpha_bar,beta,beta_tilde\n");
        for t in 1..=self.timesteps() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                t,
                fmt_f64(self.alpha(t)),
                fmt_f64(self.alpha_bar(t)),
                fmt_f64(self.beta(t)),
                fmt_f64(self.beta_tilde(t)),
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::manifest::atomic_write(path, self.to_csv().as_bytes())
    }
}

/// Convenience wrapper mirroring the free-function style of the other ops.
pub fn sigma_t(sched: &NoiseSchedule, t: usize, eta: f64) -> Result<f64> {
    sched.sigma(t, eta)
}
