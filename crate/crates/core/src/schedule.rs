//! Noise schedules and the unconditional DDPM forward/reverse mathematics.
//!
//! Timesteps are 1-based throughout: `t = 1..=T`, with `alpha_bar(0) = 1` so the
//! final reverse transition is deterministic.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{DpiError, Result};
use crate::image::ImageTensor;

const MODULE: &str = "diffusion_core";

static VARIANCE_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of variance-interpolation values that fell outside `[0, 1]` and were
/// clamped since process start.
pub fn variance_clamp_count() -> u64 {
    VARIANCE_CLAMPS.load(Ordering::Relaxed)
}

/// Per-timestep diffusion coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    tilde_betas: Vec<f64>,
    // Posterior mean coefficients on x_t and x_0.
    coef_xt: Vec<f64>,
    coef_x0: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(DpiError::param(MODULE, "schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DpiError::param(MODULE, format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |prod, a| {
                *prod *= a;
                Some(*prod)
            })
            .collect();
        let mut tilde_betas = Vec::with_capacity(betas.len());
        let mut coef_xt = Vec::with_capacity(betas.len());
        let mut coef_x0 = Vec::with_capacity(betas.len());
        for t in 0..betas.len() {
            let ab = alpha_bars[t];
            let ab_prev = if t == 0 { 1.0 } else { alpha_bars[t - 1] };
            tilde_betas.push((1.0 - ab_prev) / (1.0 - ab) * betas[t]);
            coef_xt.push(alphas[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab));
            coef_x0.push(ab_prev.sqrt() * betas[t] / (1.0 - ab));
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars, tilde_betas, coef_xt, coef_x0 })
    }

    /// `T` betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(DpiError::param(MODULE, "T must be >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DpiError::param(
                MODULE,
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Linear schedule from 1e-4 to 0.02 over 1000 steps.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(DpiError::param(MODULE, format!("timestep {t} outside 1..={}", self.steps())))
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn tilde_beta(&self, t: usize) -> f64 {
        self.tilde_betas[t - 1]
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

    pub fn tilde_betas(&self) -> &[f64] {
        &self.tilde_betas
    }

    /// `(coefficient on x_t, coefficient on x_0)` of the posterior mean at `t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        (self.coef_xt[t - 1], self.coef_x0[t - 1])
    }

    /// Test fixture: perturbs the stored `x_0` posterior coefficient at `t`.
    #[doc(hidden)]
    pub fn inject_coefficient_fault(&mut self, t: usize, delta: f64) {
        self.coef_x0[t - 1] += delta;
    }
}

/// Build a linear schedule (see [`NoiseSchedule::linear`]).
pub fn build_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

/// Variance interpolation output of a denoiser, already mapped into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum VarianceInterp {
    Scalar(f64),
    PerPixel(ImageTensor),
}

/// What a denoiser returns for `(x_t, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps: ImageTensor,
    /// `None` selects the fixed posterior variance.
    pub v: Option<VarianceInterp>,
}

impl DenoiserOutput {
    pub fn fixed(eps: ImageTensor) -> Self {
        DenoiserOutput { eps, v: None }
    }
}

/// Maps a raw network output in `[-1, 1]` to an interpolation coefficient.
pub fn v_from_raw(raw: f64) -> f64 {
    (raw + 1.0) / 2.0
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_sample(x0: &ImageTensor, t: usize, eps: &ImageTensor, sched: &NoiseSchedule) -> Result<ImageTensor> {
    sched.check_t(t)?;
    x0.check_same_shape(eps, MODULE)?;
    let ab = sched.alpha_bar(t);
    Ok(x0.lin_comb(ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// Inverse of [`forward_sample`] at the same `(t, eps)`.
pub fn predict_x0(x_t: &ImageTensor, eps: &ImageTensor, t: usize, sched: &NoiseSchedule) -> Result<ImageTensor> {
    sched.check_t(t)?;
    x_t.check_same_shape(eps, MODULE)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    Ok(x_t.lin_comb(inv, eps, -(1.0 - ab).sqrt() * inv))
}

/// Noise consistent with `x_t` and a given `x_hat0`; inverse of `predict_x0` in `eps`.
pub fn eps_from_x0(x_t: &ImageTensor, x_hat0: &ImageTensor, t: usize, sched: &NoiseSchedule) -> Result<ImageTensor> {
    sched.check_t(t)?;
    x_t.check_same_shape(x_hat0, MODULE)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / (1.0 - ab).sqrt();
    Ok(x_t.lin_comb(inv, x_hat0, -ab.sqrt() * inv))
}

/// `x_hat0` clamped to `[-1, 1]` and the noise re-derived from it.
pub fn clipped_prediction(x_t: &ImageTensor, eps: &ImageTensor, t: usize, sched: &NoiseSchedule) -> Result<(ImageTensor, ImageTensor)> {
    let x0 = predict_x0(x_t, eps, t, sched)?.clamp(-1.0, 1.0);
    let eps = eps_from_x0(x_t, &x0, t, sched)?;
    Ok((x0, eps))
}

/// Mean of `q(x_{t-1} | x_t, x_0 = x_hat0)`.
pub fn posterior_mean(x_hat0: &ImageTensor, x_t: &ImageTensor, t: usize, sched: &NoiseSchedule) -> Result<ImageTensor> {
    sched.check_t(t)?;
    x_hat0.check_same_shape(x_t, MODULE)?;
    let (c_xt, c_x0) = sched.posterior_coefficients(t);
    Ok(x_t.lin_comb(c_xt, x_hat0, c_x0))
}

fn clamp_v(v: f64) -> f64 {
    if !(0.0..=1.0).contains(&v) {
        VARIANCE_CLAMPS.fetch_add(1, Ordering::Relaxed);
        log::warn!("variance interpolation {v} clamped into [0, 1]");
        v.clamp(0.0, 1.0)
    } else {
        v
    }
}

/// `exp(v log beta_t + (1 - v) log tilde_beta_t)`. At `t = 1` the variance is 0.
pub fn posterior_variance(v: f64, t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_t(t)?;
    if t == 1 {
        return Ok(0.0);
    }
    Ok(log_interp(clamp_v(v), sched.beta(t), sched.tilde_beta(t)))
}

// Endpoints returned exactly rather than through exp(ln(.)).
fn log_interp(v: f64, beta: f64, tilde_beta: f64) -> f64 {
    if v == 0.0 {
        tilde_beta
    } else if v == 1.0 {
        beta
    } else {
        (v * beta.ln() + (1.0 - v) * tilde_beta.ln()).exp()
    }
}

/// Per-pixel reverse-step variance for a denoiser output.
pub fn reverse_variance(out: &DenoiserOutput, t: usize, sched: &NoiseSchedule) -> Result<ImageTensor> {
    sched.check_t(t)?;
    let (h, w, c) = out.eps.shape();
    if t == 1 {
        return Ok(ImageTensor::zeros(h, w, c));
    }
    match &out.v {
        None => Ok(ImageTensor::filled(h, w, c, sched.tilde_beta(t))),
        Some(VarianceInterp::Scalar(v)) => Ok(ImageTensor::filled(h, w, c, posterior_variance(*v, t, sched)?)),
        Some(VarianceInterp::PerPixel(v)) => {
            out.eps.check_same_shape(v, MODULE)?;
            let (b, tb) = (sched.beta(t), sched.tilde_beta(t));
            Ok(v.map(|vi| log_interp(clamp_v(vi), b, tb)))
        }
    }
}

/// `x_{t-1} = mu(x_hat0(x_t, eps), x_t) + sqrt(Sigma) * noise`.
pub fn reverse_step(
    x_t: &ImageTensor,
    out: &DenoiserOutput,
    t: usize,
    sched: &NoiseSchedule,
    noise: &ImageTensor,
) -> Result<ImageTensor> {
    x_t.check_same_shape(noise, MODULE)?;
    let x0 = predict_x0(x_t, &out.eps, t, sched)?;
    let mean = posterior_mean(&x0, x_t, t, sched)?;
    let var = reverse_variance(out, t, sched)?;
    let mut next = mean;
    for ((m, v), z) in next.data_mut().iter_mut().zip(var.data()).zip(noise.data()) {
        *m += v.sqrt() * z;
    }
    Ok(next)
}
