//! Condition corrector: maps a grid-masked posterior sample and the initial
//! condition to a corrected grid condition.
//!
//! The trained corrector works at grid resolution: grid values are read back
//! with [`backtrack`], passed through a time-conditioned encoder-decoder whose
//! first feature map receives the luminance of `y_T`, added as a residual to
//! `y_T`'s grid values and projected back onto the grid.

use std::cell::Cell;

use rand::Rng;

use crate::degradation::{degrade_stages, downsample_with, resize_bicubic, DegradationConfig, DownsampleMode, Stage};
use crate::denoiser::{from_feat, to_feat};
use crate::error::{DpiError, Result};
use crate::image::ImageTensor;
use crate::masks::{backtrack, project_initial_condition, Condition, FixedMask};
use crate::nn::{Feat, UNet, UNetCache, UNetConfig};
use crate::rng::{gaussian_image, Domain, RngStreams};
use crate::schedule::{forward_sample, posterior_mean, NoiseSchedule};
use crate::train::{fit, LossRecord, TrainConfig};

const MODULE: &str = "corrector";

pub trait Corrector: Sync {
    /// `y_{t-1} = CRT(m_f * y'_{t-1}, y_T, t)`.
    fn correct(&self, masked: &ImageTensor, y_t0: &Condition, t: usize, fm: &FixedMask) -> Result<Condition>;

    fn kind(&self) -> &str;

    fn is_trained(&self) -> bool {
        false
    }
}

/// Returns the masked input's grid values unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCorrector;

impl Corrector for IdentityCorrector {
    fn correct(&self, masked: &ImageTensor, _y_t0: &Condition, t: usize, fm: &FixedMask) -> Result<Condition> {
        Ok(Condition::intermediate(fm.apply(masked)?, t - 1))
    }

    fn kind(&self) -> &str {
        "identity"
    }
}

/// Ignores the posterior and re-issues `y_T` at every step.
#[derive(Debug, Clone, Copy, Default)]
pub struct HoldCondition;

impl Corrector for HoldCondition {
    fn correct(&self, masked: &ImageTensor, y_t0: &Condition, t: usize, fm: &FixedMask) -> Result<Condition> {
        fm.check_image(masked)?;
        Ok(Condition::intermediate(y_t0.values.clone(), t - 1))
    }

    fn kind(&self) -> &str {
        "hold"
    }
}

/// `Omega(t) = t / T`.
pub fn omega_linear(t: usize, steps: usize) -> f64 {
    let w = t as f64 / steps as f64;
    assert!((0.0..=1.0).contains(&w), "Omega({t}) = {w} outside [0, 1]");
    w
}

#[derive(Debug, Clone)]
pub struct CrtModel {
    pub net: UNet,
}

impl CrtModel {
    pub fn new(channels: usize, base: usize, seed: u64) -> Result<Self> {
        let mut net = UNet::new(UNetConfig { in_ch: channels, out_ch: channels, base, cond: true })?;
        net.init(&mut RngStreams::new(seed).stream(Domain::Init, 1), true);
        Ok(CrtModel { net })
    }

    pub fn from_net(net: UNet) -> Result<Self> {
        let c = net.config();
        if !c.cond || c.in_ch != c.out_ch {
            return Err(DpiError::param(MODULE, "corrector network must map C channels to C with a condition pathway"));
        }
        Ok(CrtModel { net })
    }

    pub fn channels(&self) -> usize {
        self.net.config().in_ch
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

fn check_inputs(net: &UNet, masked: &ImageTensor, y_t0: &Condition, fm: &FixedMask) -> Result<()> {
    fm.check_image(masked)?;
    masked.check_same_shape(&y_t0.values, MODULE)?;
    let c = net.config().in_ch;
    if masked.channels() != c {
        return Err(DpiError::shape(MODULE, format!("corrector expects {c} channels, got {}", masked.channels())));
    }
    Ok(())
}

/// Grid-resolution pass: `y_T` grid values plus the predicted residual, and
/// the network cache.
fn grid_forward(net: &UNet, masked: &ImageTensor, y_t0: &Condition, t: usize, fm: &FixedMask) -> Result<(Feat, UNetCache)> {
    check_inputs(net, masked, y_t0, fm)?;
    let k = fm.stride();
    let g_in = backtrack(masked, k)?;
    let g_y = backtrack(&y_t0.values, k)?;
    let lum = g_y.luminance();
    let (mut out, cache) = net.forward(&to_feat(&g_in), t as f64, Some(lum.data()))?;
    out.d.iter_mut().zip(g_y.data()).for_each(|(o, y)| *o += y);
    Ok((out, cache))
}

impl Corrector for CrtModel {
    fn correct(&self, masked: &ImageTensor, y_t0: &Condition, t: usize, fm: &FixedMask) -> Result<Condition> {
        crt_forward(self, masked, y_t0, t, fm)
    }

    fn kind(&self) -> &str {
        "crt"
    }

    fn is_trained(&self) -> bool {
        true
    }
}

pub fn crt_forward(model: &CrtModel, masked: &ImageTensor, y_t0: &Condition, t: usize, fm: &FixedMask) -> Result<Condition> {
    let (out, _) = grid_forward(&model.net, masked, y_t0, t, fm)?;
    let grid = from_feat(out)?;
    Ok(Condition::intermediate(project_initial_condition(&grid, fm)?.values, t - 1))
}

/// Source of `y_T` for a ground-truth image.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionSource {
    /// Bicubic downsample by `scale`.
    Bicubic { scale: usize },
    /// Blur, downsample, noise and JPEG as in the degradation pipeline.
    Degrade(DegradationConfig),
}

/// Low-resolution observation of `hr` under `src`.
pub fn observe(hr: &ImageTensor, src: &ConditionSource) -> Result<ImageTensor> {
    match src {
        ConditionSource::Bicubic { scale } => downsample_with(hr, *scale, DownsampleMode::Bicubic),
        ConditionSource::Degrade(cfg) => {
            let stages = degrade_stages(hr, cfg)?;
            Ok(stages.into_iter().find(|(s, _)| *s == Stage::Jpeg).expect("jpeg stage").1)
        }
    }
}

/// `y_T`: the observation resized to grid resolution and placed on the grid.
pub fn initial_condition(lr: &ImageTensor, fm: &FixedMask) -> Result<Condition> {
    let (gh, gw) = fm.grid_shape();
    project_initial_condition(&resize_bicubic(lr, gh, gw)?, fm)
}

#[derive(Debug, Clone)]
pub struct CrtPair {
    pub gt: ImageTensor,
    pub y_t0: Condition,
}

pub fn make_pairs(images: &[ImageTensor], src: &ConditionSource, fm: &FixedMask) -> Result<Vec<CrtPair>> {
    images
        .iter()
        .enumerate()
        .map(|(i, gt)| {
            let src = match src {
                ConditionSource::Degrade(cfg) => ConditionSource::Degrade(DegradationConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() }),
                other => other.clone(),
            };
            Ok(CrtPair { gt: gt.clone(), y_t0: initial_condition(&observe(gt, &src)?, fm)? })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CrtTrainSample {
    pub gt: ImageTensor,
    pub y_t0: Condition,
    pub t: usize,
    /// `I'_{G,t-1}`: a posterior sample built from the ground truth.
    pub gt_prev: ImageTensor,
    /// Detached first-pass corrector output.
    pub x_crt: Option<ImageTensor>,
}

impl CrtTrainSample {
    /// `x_t = fwd(I_G, t, eps)`, `I' = mu(I_G, x_t) + sqrt(tilde_beta_t) z`.
    pub fn new(pair: &CrtPair, t: usize, eps: &ImageTensor, z: &ImageTensor, sched: &NoiseSchedule) -> Result<Self> {
        let x_t = forward_sample(&pair.gt, t, eps, sched)?;
        let mean = posterior_mean(&pair.gt, &x_t, t, sched)?;
        let gt_prev = mean.lin_comb(1.0, z, sched.tilde_beta(t).sqrt());
        Ok(CrtTrainSample { gt: pair.gt.clone(), y_t0: pair.y_t0.clone(), t, gt_prev, x_crt: None })
    }

    /// Fills `x_crt` with a forward pass on the masked posterior sample.
    pub fn with_first_pass(mut self, model: &CrtModel, fm: &FixedMask) -> Result<Self> {
        let c = crt_forward(model, &fm.apply(&self.gt_prev)?, &self.y_t0, self.t, fm)?;
        self.x_crt = Some(c.values);
        Ok(self)
    }
}

/// Mean squared error over grid positions and channels.
pub fn grid_sq_error(out: &ImageTensor, gt: &ImageTensor, fm: &FixedMask) -> Result<f64> {
    out.check_same_shape(gt, MODULE)?;
    fm.check_image(out)?;
    let k = fm.stride();
    let (a, b) = (backtrack(out, k)?, backtrack(gt, k)?);
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `|| I_G * m_f - CRT(m_f * I'_{G,t-1}, y_T, t) ||^2`, grid mean.
pub fn loss_prior(model: &CrtModel, s: &CrtTrainSample, fm: &FixedMask) -> Result<f64> {
    let out = crt_forward(model, &fm.apply(&s.gt_prev)?, &s.y_t0, s.t, fm)?;
    grid_sq_error(&out.values, &s.gt, fm)
}

/// `|| I_G * m_f - CRT(m_f * x_crt, y_T, t) ||^2`, grid mean.
pub fn loss_gap(model: &CrtModel, s: &CrtTrainSample, fm: &FixedMask) -> Result<f64> {
    let x_crt = s.x_crt.as_ref().ok_or_else(|| DpiError::param(MODULE, "gap loss needs the first-pass output"))?;
    let out = crt_forward(model, &fm.apply(x_crt)?, &s.y_t0, s.t, fm)?;
    grid_sq_error(&out.values, &s.gt, fm)
}

/// `Omega L_prior + (1 - Omega) L_gap`.
pub fn loss_crt(model: &CrtModel, s: &CrtTrainSample, fm: &FixedMask, omega: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(DpiError::param(MODULE, format!("Omega = {omega} outside [0, 1]")));
    }
    Ok(omega * loss_prior(model, s, fm)? + (1.0 - omega) * loss_gap(model, s, fm)?)
}

fn weighted_backward(net: &UNet, masked: &ImageTensor, s: &CrtTrainSample, fm: &FixedMask, weight: f64, grads: &mut [f64]) -> Result<(f64, Feat)> {
    let (out, cache) = grid_forward(net, masked, &s.y_t0, s.t, fm)?;
    let gt = backtrack(&s.gt, fm.stride())?;
    let n = out.d.len() as f64;
    let diff: Vec<f64> = out.d.iter().zip(gt.data()).map(|(a, b)| a - b).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    if weight != 0.0 {
        let dout = Feat::from_vec(out.c, out.h, out.w, diff.iter().map(|d| weight * 2.0 * d / n).collect());
        net.backward(&cache, &dout, grads);
    }
    Ok((loss, out))
}

/// Loss of one sample and its accumulated gradient. The first pass is run
/// here when `x_crt` is absent; it is treated as a constant.
pub fn crt_sample_grad(model: &CrtModel, s: &CrtTrainSample, fm: &FixedMask, omega: f64, grads: &mut [f64]) -> Result<f64> {
    sample_grad(&model.net, s, fm, omega, grads)
}

fn sample_grad(net: &UNet, s: &CrtTrainSample, fm: &FixedMask, omega: f64, grads: &mut [f64]) -> Result<f64> {
    let masked = fm.apply(&s.gt_prev)?;
    let (l_prior, prior_out) = weighted_backward(net, &masked, s, fm, omega, grads)?;
    let x_crt = match &s.x_crt {
        Some(x) => x.clone(),
        None => project_initial_condition(&from_feat(prior_out)?, fm)?.values,
    };
    let (l_gap, _) = weighted_backward(net, &fm.apply(&x_crt)?, s, fm, 1.0 - omega, grads)?;
    let loss = omega * l_prior + (1.0 - omega) * l_gap;
    if !loss.is_finite() {
        return Err(DpiError::numerical(MODULE, format!("non-finite corrector loss at t = {}", s.t)));
    }
    Ok(loss)
}

/// Mean loss and gradient over a batch.
pub fn crt_gradients(model: &CrtModel, batch: &[CrtTrainSample], fm: &FixedMask, steps: usize) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(DpiError::param(MODULE, "empty batch"));
    }
    let mut grads = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    for s in batch {
        loss += crt_sample_grad(model, s, fm, omega_linear(s.t, steps), &mut grads)?;
    }
    let inv = 1.0 / batch.len() as f64;
    grads.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grads))
}

#[derive(Debug, Clone)]
pub struct CrtTrainOutcome {
    pub raw: CrtModel,
    pub ema: CrtModel,
    pub losses: Vec<LossRecord>,
    /// Smallest and largest `Omega(t)` used.
    pub omega_range: (f64, f64),
}

pub fn train_crt(pairs: &[CrtPair], fm: &FixedMask, sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<CrtTrainOutcome> {
    let first = pairs.first().ok_or_else(|| DpiError::data(MODULE, "empty dataset"))?;
    fm.check_image(&first.gt)?;
    let (h, w, c) = first.gt.shape();
    let model = CrtModel::new(c, cfg.base, cfg.seed)?;
    let lo = Cell::new(f64::INFINITY);
    let hi = Cell::new(f64::NEG_INFINITY);
    let out = fit(model.net, pairs.len(), cfg, |net, item, rng, grads| {
        let t = rng.random_range(1..=sched.steps());
        let eps = gaussian_image(rng, h, w, c);
        let z = gaussian_image(rng, h, w, c);
        let omega = omega_linear(t, sched.steps());
        lo.set(lo.get().min(omega));
        hi.set(hi.get().max(omega));
        let sample = CrtTrainSample::new(&pairs[item], t, &eps, &z, sched)?;
        sample_grad(net, &sample, fm, omega, grads)
    })?;
    Ok(CrtTrainOutcome {
        raw: CrtModel::from_net(out.raw)?,
        ema: CrtModel::from_net(out.ema)?,
        losses: out.losses,
        omega_range: (lo.get(), hi.get()),
    })
}
