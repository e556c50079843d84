//! Forward diffusion, the tractable posterior, stochastic (DDPM) and
//! eta-generalized deterministic (DDIM) sampling loops, and closed-form KL
//! diagnostics of the variational bound.
//!
//! Timesteps are 1-based with `alpha_bar(0) = 1`; every formula below is
//! written against that convention.

use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sample::Sample;
use crate::schedule::NoiseSchedule;

/// Which constant the reverse-process variance is fixed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelVariance {
    /// Posterior variance `beta_tilde_t` (the default).
    #[default]
    PosteriorBeta,
    /// Forward variance `beta_t`.
    ForwardBeta,
}

impl ModelVariance {
    fn value(self, sched: &NoiseSchedule, t: usize) -> f64 {
        match self {
            ModelVariance::PosteriorBeta => sched.beta_tilde(t),
            ModelVariance::ForwardBeta => sched.beta(t),
        }
    }
}

/// Direct flow to noise level `t`: `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
///
/// `t = 0` is allowed and returns `x0` unchanged (`abar_0 = 1`).
pub fn forward_diffuse(
    x0: &Sample,
    sched: &NoiseSchedule,
    t: usize,
    eps: &Sample,
) -> Result<Sample> {
    if t > sched.timesteps() {
        return Err(Error::TimestepOutOfRange {
            t,
            t_max: sched.timesteps(),
        });
    }
    let abar = sched.alpha_bar(t);
    x0.zip(eps, |x, e| abar.sqrt() * x + (1.0 - abar).sqrt() * e)
}

/// Mean of the forward-process posterior `q(x_{t-1} | x_t, x_0)`.
pub fn posterior_mean(
    x0: &Sample,
    xt: &Sample,
    sched: &NoiseSchedule,
    t: usize,
) -> Result<Sample> {
    sched.check_t(t)?;
    let abar_prev = sched.alpha_bar(t - 1);
    let abar = sched.alpha_bar(t);
    let c_xt = sched.alpha(t).sqrt() * (1.0 - abar_prev) / (1.0 - abar);
    let c_x0 = abar_prev.sqrt() * sched.beta(t) / (1.0 - abar);
    xt.zip(x0, |xt_v, x0_v| c_xt * xt_v + c_x0 * x0_v)
}

/// Reverse-step mean reconstructed from a noise prediction:
/// `(x_t - (1 - alpha_t)/sqrt(1 - abar_t) * eps) / sqrt(alpha_t)`.
pub fn mean_from_eps(
    xt: &Sample,
    eps_pred: &Sample,
    sched: &NoiseSchedule,
    t: usize,
) -> Result<Sample> {
    sched.check_t(t)?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let coef = (1.0 - sched.alpha(t)) / (1.0 - sched.alpha_bar(t)).sqrt();
    xt.zip(eps_pred, |x, e| inv_sqrt_alpha * (x - coef * e))
}

/// Full stochastic reverse loop from pure noise, with `z = 0` at the final
/// step. Per-step variance defaults to `beta_tilde_t`.
pub fn ddpm_sample(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    shape: &[usize],
    rng: &mut RngStream,
) -> Result<Sample> {
    ddpm_sample_with(model, sched, shape, ModelVariance::PosteriorBeta, rng)
}

pub fn ddpm_sample_with(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    shape: &[usize],
    variance: ModelVariance,
    rng: &mut RngStream,
) -> Result<Sample> {
    let mut x = rng.normal_sample(shape);
    for t in (1..=sched.timesteps()).rev() {
        let eps = model.predict_eps(&x, sched.alpha_bar(t))?;
        let mean = mean_from_eps(&x, &eps, sched, t)?;
        x = if t > 1 {
            let sigma = variance.value(sched, t).sqrt();
            let z = rng.normal_sample(shape);
            mean.add_scaled(&z, sigma)?
        } else {
            mean
        };
    }
    Ok(x)
}

/// One eta-generalized reverse step. Returns `(x_prev, x0_pred)` where
/// `x0_pred = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)` and
/// `x_prev = sqrt(abar_{t-1}) x0_pred + sqrt(1 - abar_{t-1} - sigma^2) eps
///  + sigma z`.
///
/// At `eta = 0` the step is deterministic and `rng` is untouched.
pub fn ddim_step(
    xt: &Sample,
    eps_pred: &Sample,
    sched: &NoiseSchedule,
    t: usize,
    eta: f64,
    rng: &mut RngStream,
) -> Result<(Sample, Sample)> {
    let sigma = sched.sigma(t, eta)?;
    let abar = sched.alpha_bar(t);
    let abar_prev = sched.alpha_bar(t - 1);
    let residual_var = 1.0 - abar_prev - sigma * sigma;
    if residual_var < 0.0 {
        return Err(Error::InvalidEta {
            eta,
            t,
            kind: sched.kind().to_string(),
        });
    }
    let x0_pred = xt.zip(eps_pred, |x, e| (x - (1.0 - abar).sqrt() * e) / abar.sqrt())?;
    let mut x_prev = x0_pred.zip(eps_pred, |x0, e| {
        abar_prev.sqrt() * x0 + residual_var.sqrt() * e
    })?;
    if sigma > 0.0 {
        let z = rng.normal_sample(xt.shape());
        x_prev = x_prev.add_scaled(&z, sigma)?;
    }
    Ok((x_prev, x0_pred))
}

/// Folds [`ddim_step`] from `t = T` down to 1. With `eta = 0` the output is
/// a deterministic function of the initial latent.
pub fn ddim_sample(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    x_latent: &Sample,
    eta: f64,
    rng: &mut RngStream,
) -> Result<Sample> {
    x_latent.ensure_finite("ddim_sample latent")?;
    let mut x = x_latent.clone();
    for t in (1..=sched.timesteps()).rev() {
        let eps = model.predict_eps(&x, sched.alpha_bar(t))?;
        let (x_prev, _) = ddim_step(&x, &eps, sched, t, eta, rng)?;
        x = x_prev;
    }
    Ok(x)
}

/// KL between two isotropic Gaussians `N(mean_q, var_q I)` and
/// `N(mean_p, var_p I)`, in nats.
pub fn gaussian_kl(mean_q: &Sample, var_q: f64, mean_p: &Sample, var_p: f64) -> Result<f64> {
    if !(var_q > 0.0) || !(var_p > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "gaussian_kl needs positive variances, got {var_q} and {var_p}"
        )));
    }
    mean_q.check_same_shape(mean_p)?;
    let d = mean_q.len() as f64;
    let diff_sq = mean_q
        .values()
        .iter()
        .zip(mean_p.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();
    Ok(0.5 * (d * ((var_p / var_q).ln() + var_q / var_p - 1.0) + diff_sq / var_p))
}

/// Diagnostic KL term `D_KL(q(x_{t-1}|x_t,x_0) || p)` where `q` has mean
/// `posterior_mean` and variance `beta_tilde_t`, and `p = N(model_mean,
/// model_var I)`. Requires `t >= 2` (the `t = 1` posterior is degenerate).
pub fn vlb_term_kl(
    x0: &Sample,
    xt: &Sample,
    model_mean: &Sample,
    model_var: f64,
    sched: &NoiseSchedule,
    t: usize,
) -> Result<f64> {
    if t < 2 {
        return Err(Error::TimestepOutOfRange {
            t,
            t_max: sched.timesteps(),
        });
    }
    let mu_tilde = posterior_mean(x0, xt, sched, t)?;
    gaussian_kl(&mu_tilde, sched.beta_tilde(t), model_mean, model_var)
}
