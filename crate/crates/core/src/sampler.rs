//! Two-stage masked posterior sampling, ancestral and implicit (DDIM).
//!
//! Each step evaluates the denoiser once, draws one Gaussian image shared by
//! the sample branch and the condition branch, then combines them: above
//! `tau` the fixed grid mask copies the condition branch (FCM); at or below
//! `tau` a Bernoulli edge mask blends it in with weight `w = t / omega`
//! (RACM). The corrector then produces the next condition.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::corrector::Corrector;
use crate::denoiser::Denoiser;
use crate::error::{DpiError, Result};
use crate::image::ImageTensor;
use crate::masks::{mask_gen, AdaptiveMask, Condition, FixedMask};
use crate::rng::{gaussian_image, Domain, RngStreams};
use crate::schedule::{clipped_prediction, forward_sample, posterior_mean, predict_x0, reverse_variance, NoiseSchedule};

const MODULE: &str = "sampler";

static SIGMA_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of implicit steps whose `sigma^2` exceeded `1 - alpha_bar_prev`.
pub fn sigma_clamp_count() -> u64 {
    SIGMA_CLAMPS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ancestral,
    Implicit,
}

/// Which implicit-step variance to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaForm {
    /// `eta * sqrt((1-ab_prev)/(1-ab_t)) * sqrt((1-ab_t)/ab_prev)` taken as `sigma^2`.
    #[default]
    Printed,
    /// `sigma = eta * sqrt((1-ab_prev)/(1-ab_t)) * sqrt(1 - ab_t/ab_prev)`.
    Canonical,
}

/// How the implicit condition branch forms its clean estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConditionUpdate {
    /// The condition is the clean estimate: `x0_hat := y_t`.
    #[default]
    Aligned,
    /// `y_t` is substituted for `x_t` in the implicit update.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpiConfig {
    pub tau: usize,
    pub s: f64,
    pub omega: f64,
    pub k: usize,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub sigma_form: SigmaForm,
    pub condition_update: ConditionUpdate,
    /// Clamp `x_hat0` to `[-1, 1]` and re-derive `eps_theta` before each update.
    pub clip_x0: bool,
    /// Record every `trace_stride`-th step; 0 disables tracing.
    pub trace_stride: usize,
}

impl Default for DpiConfig {
    fn default() -> Self {
        Self::ancestral(300, 1.2, 750.0)
    }
}

impl DpiConfig {
    /// 1000-step ancestral sampling with `k = 2`.
    pub fn ancestral(tau: usize, s: f64, omega: f64) -> Self {
        DpiConfig {
            tau,
            s,
            omega,
            k: 2,
            sampler: SamplerKind::Ancestral,
            steps: 1000,
            eta: 0.1,
            seed: 0,
            sigma_form: SigmaForm::Printed,
            condition_update: ConditionUpdate::Aligned,
            clip_x0: true,
            trace_stride: 0,
        }
    }

    /// Implicit sampling with `eta = 0.1`.
    pub fn implicit(steps: usize, tau: usize, s: f64, omega: f64) -> Self {
        DpiConfig { sampler: SamplerKind::Implicit, steps, ..Self::ancestral(tau, s, omega) }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 {
            return Err(DpiError::param(MODULE, "steps must be >= 1"));
        }
        if self.tau > self.steps {
            return Err(DpiError::param(MODULE, format!("tau = {} exceeds steps = {}", self.tau, self.steps)));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(DpiError::param(MODULE, "omega must be > 0"));
        }
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return Err(DpiError::param(MODULE, "s must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(DpiError::param(MODULE, "eta must be in [0, 1]"));
        }
        if self.k == 0 {
            return Err(DpiError::param(MODULE, "k must be >= 1"));
        }
        match self.sampler {
            SamplerKind::Ancestral if self.steps != sched.steps() => Err(DpiError::param(
                MODULE,
                format!("ancestral sampling runs all {} steps, got steps = {}", sched.steps(), self.steps),
            )),
            SamplerKind::Implicit if self.steps > sched.steps() => {
                Err(DpiError::param(MODULE, format!("steps = {} exceeds T = {}", self.steps, sched.steps())))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    Fcm,
    Racm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub rule: StepRule,
    pub w: Option<f64>,
    pub mask_popcount: Option<usize>,
    /// `x_{t-1}`.
    pub x: ImageTensor,
    /// `y_{t-1}` after the corrector.
    pub y: ImageTensor,
}

/// Per-step snapshots, strictly decreasing in `t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleTrace {
    pub y_t0: Option<ImageTensor>,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    pub fcm_steps: usize,
    pub racm_steps: usize,
    pub w_min: f64,
    pub w_max: f64,
    pub denoiser_calls: usize,
    /// Set when the corrector is not a trained model.
    pub untrained_corrector: bool,
}

impl Default for SampleStats {
    fn default() -> Self {
        SampleStats {
            fcm_steps: 0,
            racm_steps: 0,
            w_min: f64::INFINITY,
            w_max: f64::NEG_INFINITY,
            denoiser_calls: 0,
            untrained_corrector: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub image: ImageTensor,
    pub stats: SampleStats,
    pub trace: Option<SampleTrace>,
}

/// `y_t^n = sqrt(ab_t) y_t + sqrt(1 - ab_t) eps_theta`.
pub fn noisy_condition(y_t: &Condition, eps: &ImageTensor, t: usize, sched: &NoiseSchedule) -> Result<ImageTensor> {
    forward_sample(&y_t.values, t, eps, sched)
}

/// `mu(x0_hat := y_t, x_t := y_t^n) + sqrt(Sigma) * noise`, with `Sigma` shared
/// from the sample branch.
pub fn conditional_posterior(
    y_t: &Condition,
    y_n: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
    shared_var: &ImageTensor,
    noise: &ImageTensor,
) -> Result<ImageTensor> {
    let mut out = posterior_mean(&y_t.values, y_n, t, sched)?;
    out.check_same_shape(shared_var, MODULE)?;
    out.check_same_shape(noise, MODULE)?;
    for ((o, v), z) in out.data_mut().iter_mut().zip(shared_var.data()).zip(noise.data()) {
        *o += v.sqrt() * z;
    }
    Ok(out)
}

/// Off-grid from `x_prev`, on-grid from `y_prev`.
pub fn fcm_combine(x_prev: &ImageTensor, y_prev: &ImageTensor, fm: &FixedMask) -> Result<ImageTensor> {
    x_prev.check_same_shape(y_prev, MODULE)?;
    fm.check_image(x_prev)?;
    let mut out = x_prev.clone();
    let (h, w) = (x_prev.height(), x_prev.width());
    for c in 0..x_prev.channels() {
        for i in 0..h {
            for j in 0..w {
                if fm.get(i, j) {
                    out.set(i, j, c, y_prev.get(i, j, c));
                }
            }
        }
    }
    Ok(out)
}

/// On the mask support: `w y_prev + (1 - w) x_prev`; elsewhere `x_prev`.
pub fn racm_combine(x_prev: &ImageTensor, y_prev: &ImageTensor, am: &AdaptiveMask, w: f64) -> Result<ImageTensor> {
    x_prev.check_same_shape(y_prev, MODULE)?;
    if am.height() != x_prev.height() || am.width() != x_prev.width() {
        return Err(DpiError::shape(MODULE, "adaptive mask size differs from image"));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(DpiError::param(MODULE, format!("RACM weight {w} outside [0, 1]")));
    }
    let mut out = x_prev.clone();
    for c in 0..x_prev.channels() {
        for i in 0..x_prev.height() {
            for j in 0..x_prev.width() {
                if am.get(i, j) {
                    out.set(i, j, c, w * y_prev.get(i, j, c) + (1.0 - w) * x_prev.get(i, j, c));
                }
            }
        }
    }
    Ok(out)
}

/// `w = t / omega`, clamped to `[0, 1]`.
pub fn racm_weight(t: usize, omega: f64) -> f64 {
    let w = (t as f64 / omega).clamp(0.0, 1.0);
    assert!((0.0..=1.0).contains(&w), "RACM weight {w} outside [0, 1]");
    w
}

/// Implicit-step `sigma^2` between `t` and `t_prev < t` (`t_prev = 0` at the
/// end of the chain). Not clamped.
pub fn ddim_sigma_sq(t: usize, t_prev: usize, eta: f64, sched: &NoiseSchedule, form: SigmaForm) -> f64 {
    let ab = sched.alpha_bar(t);
    let abp = sched.alpha_bar(t_prev);
    match form {
        SigmaForm::Printed => eta * ((1.0 - abp) / (1.0 - ab)).sqrt() * ((1.0 - ab) / abp).sqrt(),
        SigmaForm::Canonical => {
            let s = eta * ((1.0 - abp) / (1.0 - ab)).sqrt() * (1.0 - ab / abp).max(0.0).sqrt();
            s * s
        }
    }
}

/// Uniformly spaced timesteps over `[1, T]` including both ends, ascending.
pub fn implicit_timesteps(steps: usize, total: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(DpiError::param(MODULE, format!("steps = {steps} must be in 1..={total}")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    Ok((0..steps)
        .map(|i| 1 + ((i * (total - 1)) as f64 / (steps - 1) as f64).round() as usize)
        .collect())
}

struct Chain<'a, C: Corrector + ?Sized> {
    crt: &'a C,
    y_t0: &'a Condition,
    fm: FixedMask,
    cfg: &'a DpiConfig,
    streams: RngStreams,
    stats: SampleStats,
    trace: Option<SampleTrace>,
}

impl<C: Corrector + ?Sized> Chain<'_, C> {
    /// Stage logic and corrector call shared by both samplers. `index` is the
    /// value compared with `tau` and `omega`; `t` is the diffusion timestep.
    fn combine(
        &mut self,
        x_prime: ImageTensor,
        y_prime: ImageTensor,
        y: &Condition,
        index: usize,
        t: usize,
    ) -> Result<(ImageTensor, Condition)> {
        let (x_next, y_prime, rule, w, pop) = if index > self.cfg.tau {
            self.stats.fcm_steps += 1;
            (fcm_combine(&x_prime, &y_prime, &self.fm)?, y_prime, StepRule::Fcm, None, None)
        } else {
            let mut rng = self.streams.stream(Domain::AdaptiveMask, t as u64);
            let am = mask_gen(y, &self.fm, self.cfg.s, &mut rng)?;
            let w = racm_weight(index, self.cfg.omega);
            self.stats.racm_steps += 1;
            self.stats.w_min = self.stats.w_min.min(w);
            self.stats.w_max = self.stats.w_max.max(w);
            let x_next = racm_combine(&x_prime, &y_prime, &am, w)?;
            (x_next.clone(), x_next, StepRule::Racm, Some(w), Some(am.popcount()))
        };
        let y_next = self.crt.correct(&self.fm.apply(&y_prime)?, self.y_t0, t, &self.fm)?;
        if !x_next.all_finite() || !y_next.values.all_finite() {
            return Err(DpiError::numerical(MODULE, format!("non-finite state at t = {t}")));
        }
        if let Some(tr) = self.trace.as_mut() {
            let stride = self.cfg.trace_stride.max(1);
            if index % stride == 0 || index == 1 {
                tr.records.push(TraceRecord { t, rule, w, mask_popcount: pop, x: x_next.clone(), y: y_next.values.clone() });
            }
        }
        Ok((x_next, y_next))
    }
}

fn start<'a, C: Corrector + ?Sized>(
    crt: &'a C,
    y_t0: &'a Condition,
    cfg: &'a DpiConfig,
    sched: &NoiseSchedule,
) -> Result<Chain<'a, C>> {
    cfg.validate(sched)?;
    let (h, w) = (y_t0.values.height(), y_t0.values.width());
    let fm = FixedMask::new(h, w, cfg.k)?;
    fm.check_image(&y_t0.values)?;
    let untrained = !crt.is_trained();
    if untrained {
        log::warn!("sampling with the '{}' corrector; the condition is not corrected", crt.kind());
    }
    Ok(Chain {
        crt,
        y_t0,
        fm,
        cfg,
        streams: RngStreams::new(cfg.seed),
        stats: SampleStats { untrained_corrector: untrained, ..SampleStats::default() },
        trace: (cfg.trace_stride > 0).then(|| SampleTrace { y_t0: Some(y_t0.values.clone()), records: Vec::new() }),
    })
}

/// Ancestral two-stage sampling over all `T` steps.
pub fn dpi_sample<D: Denoiser + ?Sized, C: Corrector + ?Sized>(
    den: &D,
    crt: &C,
    y_t0: &Condition,
    cfg: &DpiConfig,
    sched: &NoiseSchedule,
) -> Result<SampleOutput> {
    if cfg.sampler != SamplerKind::Ancestral {
        return Err(DpiError::param(MODULE, "dpi_sample needs the ancestral sampler"));
    }
    let mut chain = start(crt, y_t0, cfg, sched)?;
    let (h, w, c) = y_t0.values.shape();
    let mut x = gaussian_image(&mut chain.streams.stream(Domain::InitNoise, 0), h, w, c);
    let mut y = y_t0.clone();
    for t in (1..=sched.steps()).rev() {
        let mut out = den.evaluate(&x, t)?;
        chain.stats.denoiser_calls += 1;
        if cfg.clip_x0 {
            out.eps = clipped_prediction(&x, &out.eps, t, sched)?.1;
        }
        let var = reverse_variance(&out, t, sched)?;
        let z = gaussian_image(&mut chain.streams.stream(Domain::StepNoise, t as u64), h, w, c);
        let x0 = predict_x0(&x, &out.eps, t, sched)?;
        let mut x_prime = posterior_mean(&x0, &x, t, sched)?;
        for ((m, v), zi) in x_prime.data_mut().iter_mut().zip(var.data()).zip(z.data()) {
            *m += v.sqrt() * zi;
        }
        let y_n = noisy_condition(&y, &out.eps, t, sched)?;
        let y_prime = conditional_posterior(&y, &y_n, t, sched, &var, &z)?;
        let (xn, yn) = chain.combine(x_prime, y_prime, &y, t, t)?;
        x = xn;
        y = yn;
    }
    Ok(SampleOutput { image: x, stats: chain.stats, trace: chain.trace })
}

/// Implicit two-stage sampling over a uniform timestep subsequence. `tau` and
/// `omega` refer to positions in the subsequence (1-based).
pub fn dpi_sample_ddim<D: Denoiser + ?Sized, C: Corrector + ?Sized>(
    den: &D,
    crt: &C,
    y_t0: &Condition,
    cfg: &DpiConfig,
    sched: &NoiseSchedule,
) -> Result<SampleOutput> {
    if cfg.sampler != SamplerKind::Implicit {
        return Err(DpiError::param(MODULE, "dpi_sample_ddim needs the implicit sampler"));
    }
    let mut chain = start(crt, y_t0, cfg, sched)?;
    let ts = implicit_timesteps(cfg.steps, sched.steps())?;
    let (h, w, c) = y_t0.values.shape();
    let mut x = gaussian_image(&mut chain.streams.stream(Domain::InitNoise, 0), h, w, c);
    let mut y = y_t0.clone();
    for i in (1..=ts.len()).rev() {
        let t = ts[i - 1];
        let t_prev = if i >= 2 { ts[i - 2] } else { 0 };
        let mut out = den.evaluate(&x, t)?;
        chain.stats.denoiser_calls += 1;
        if cfg.clip_x0 {
            out.eps = clipped_prediction(&x, &out.eps, t, sched)?.1;
        }
        let eps = &out.eps;
        let (ab, abp) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
        let mut sigma_sq = ddim_sigma_sq(t, t_prev, cfg.eta, sched, cfg.sigma_form);
        if sigma_sq > 1.0 - abp {
            SIGMA_CLAMPS.fetch_add(1, Ordering::Relaxed);
            sigma_sq = 1.0 - abp;
        }
        let sigma = sigma_sq.sqrt();
        let dir = (1.0 - abp - sigma_sq).max(0.0).sqrt();
        let z = gaussian_image(&mut chain.streams.stream(Domain::StepNoise, t as u64), h, w, c);
        let step = |x0: &ImageTensor| -> ImageTensor {
            let mut o = x0.lin_comb(abp.sqrt(), eps, dir);
            o.data_mut().iter_mut().zip(z.data()).for_each(|(a, zi)| *a += sigma * zi);
            o
        };
        let x_prime = step(&predict_x0(&x, eps, t, sched)?);
        let y_clean = match cfg.condition_update {
            ConditionUpdate::Aligned => y.values.clone(),
            ConditionUpdate::Literal => y.values.lin_comb(1.0 / ab.sqrt(), eps, -(1.0 - ab).sqrt() / ab.sqrt()),
        };
        let y_prime = step(&y_clean);
        let (xn, yn) = chain.combine(x_prime, y_prime, &y, i, t)?;
        x = xn;
        y = yn;
    }
    Ok(SampleOutput { image: x, stats: chain.stats, trace: chain.trace })
}

/// Unconditional implicit sampling over `steps` uniform timesteps.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample_unconditional<D: Denoiser + ?Sized>(
    den: &D,
    sched: &NoiseSchedule,
    shape: (usize, usize, usize),
    streams: &RngStreams,
    steps: usize,
    eta: f64,
    form: SigmaForm,
    clip_x0: bool,
) -> Result<ImageTensor> {
    let ts = implicit_timesteps(steps, sched.steps())?;
    let (h, w, c) = shape;
    let mut x = gaussian_image(&mut streams.stream(Domain::InitNoise, 0), h, w, c);
    for i in (1..=ts.len()).rev() {
        let t = ts[i - 1];
        let t_prev = if i >= 2 { ts[i - 2] } else { 0 };
        let out = den.evaluate(&x, t)?;
        let (x0, eps) = if clip_x0 {
            clipped_prediction(&x, &out.eps, t, sched)?
        } else {
            (predict_x0(&x, &out.eps, t, sched)?, out.eps)
        };
        let abp = sched.alpha_bar(t_prev);
        let mut sigma_sq = ddim_sigma_sq(t, t_prev, eta, sched, form);
        if sigma_sq > 1.0 - abp {
            SIGMA_CLAMPS.fetch_add(1, Ordering::Relaxed);
            sigma_sq = 1.0 - abp;
        }
        let z = gaussian_image(&mut streams.stream(Domain::StepNoise, t as u64), h, w, c);
        x = x0.lin_comb(abp.sqrt(), &eps, (1.0 - abp - sigma_sq).max(0.0).sqrt());
        x.data_mut().iter_mut().zip(z.data()).for_each(|(a, zi)| *a += sigma_sq.sqrt() * zi);
    }
    Ok(x)
}

/// Dispatches on `cfg.sampler`.
pub fn run<D: Denoiser + ?Sized, C: Corrector + ?Sized>(
    den: &D,
    crt: &C,
    y_t0: &Condition,
    cfg: &DpiConfig,
    sched: &NoiseSchedule,
) -> Result<SampleOutput> {
    match cfg.sampler {
        SamplerKind::Ancestral => dpi_sample(den, crt, y_t0, cfg, sched),
        SamplerKind::Implicit => dpi_sample_ddim(den, crt, y_t0, cfg, sched),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::{HoldCondition, IdentityCorrector};
    use crate::denoiser::{CountingDenoiser, GaussianOracleDenoiser};
    use crate::masks::{make_fixed_mask, project_initial_condition, backtrack};
    use proptest::prelude::*;

    fn t2() -> NoiseSchedule {
        NoiseSchedule::linear(2, 0.1, 0.2).unwrap()
    }

    fn cond(v: f64) -> Condition {
        Condition { values: ImageTensor::filled(1, 1, 1, v), role: crate::masks::ConditionRole::Initial }
    }

    #[test]
    fn noisy_condition_cases() {
        let s = t2();
        let y = cond(1.0);
        let out = noisy_condition(&y, &ImageTensor::filled(1, 1, 1, -1.0), 2, &s).unwrap().data()[0];
        assert!((out - (0.72f64.sqrt() - 0.28f64.sqrt())).abs() < 1e-12);
        assert!((out - 0.3194).abs() < 1e-4);
        let z = noisy_condition(&y, &ImageTensor::zeros(1, 1, 1), 2, &s).unwrap().data()[0];
        assert!((z - 0.72f64.sqrt()).abs() < 1e-15);
        let d = NoiseSchedule::default_linear();
        let e = ImageTensor::filled(1, 1, 1, 0.37);
        assert!((noisy_condition(&y, &e, 1000, &d).unwrap().data()[0] - 0.37).abs() < 1e-2);
    }

    #[test]
    fn conditional_posterior_cases() {
        let s = t2();
        let y = cond(0.5);
        let eps = ImageTensor::filled(1, 1, 1, 0.3);
        let zero = ImageTensor::zeros(1, 1, 1);
        let yn = noisy_condition(&y, &eps, 2, &s).unwrap();
        assert!((predict_x0(&yn, &eps, 2, &s).unwrap().data()[0] - 0.5).abs() < 1e-12);
        let got = conditional_posterior(&y, &yn, 2, &s, &zero, &zero).unwrap().data()[0];
        let y_n = 0.72f64.sqrt() * 0.5 + 0.28f64.sqrt() * 0.3;
        let expected = 0.8f64.sqrt() * 0.1 / 0.28 * y_n + 0.9f64.sqrt() * 0.2 / 0.28 * 0.5;
        assert!((got - expected).abs() < 1e-12);
        let yn1 = noisy_condition(&y, &eps, 1, &s).unwrap();
        assert!((conditional_posterior(&y, &yn1, 1, &s, &zero, &zero).unwrap().data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fcm_cases() {
        let x = ImageTensor::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = ImageTensor::from_vec(2, 2, 1, vec![-1.0, -2.0, -3.0, -4.0]).unwrap();
        let fm = make_fixed_mask(2, 2, 2).unwrap();
        assert_eq!(fcm_combine(&x, &y, &fm).unwrap().data(), &[-1.0, 2.0, 3.0, 4.0]);
        assert_eq!(fcm_combine(&x, &y, &make_fixed_mask(2, 2, 1).unwrap()).unwrap(), y);
    }

    #[test]
    fn racm_cases() {
        let x = ImageTensor::zeros(2, 2, 1);
        let y = ImageTensor::filled(2, 2, 1, 1.0);
        let am = AdaptiveMask::from_bits(2, 2, vec![true, false, false, true]).unwrap();
        assert_eq!(racm_combine(&x, &y, &am, 0.0).unwrap(), x);
        assert_eq!(racm_combine(&x, &y, &am, 1.0).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(racm_combine(&x, &y, &am, 0.5).unwrap().data(), &[0.5, 0.0, 0.0, 0.5]);
        assert!(racm_combine(&x, &y, &am, 1.5).is_err());
        assert_eq!(racm_weight(60, 30.0), 1.0);
        assert_eq!(racm_weight(15, 30.0), 0.5);
    }

    proptest! {
        #[test]
        fn racm_is_convex(xs in prop::collection::vec(-1.0f64..1.0, 4), ys in prop::collection::vec(-1.0f64..1.0, 4), w in 0.0f64..=1.0) {
            let x = ImageTensor::from_vec(2, 2, 1, xs).unwrap();
            let y = ImageTensor::from_vec(2, 2, 1, ys).unwrap();
            let am = AdaptiveMask::from_bits(2, 2, vec![true; 4]).unwrap();
            let out = racm_combine(&x, &y, &am, w).unwrap();
            for ((o, a), b) in out.data().iter().zip(x.data()).zip(y.data()) {
                prop_assert!(*o >= a.min(*b) - 1e-15 && *o <= a.max(*b) + 1e-15);
            }
        }
    }

    #[test]
    fn sigma_cases() {
        let s = t2();
        assert_eq!(ddim_sigma_sq(2, 1, 0.0, &s, SigmaForm::Printed), 0.0);
        let expected = (0.1f64 / 0.28).sqrt() * (0.28f64 / 0.9).sqrt();
        assert!((ddim_sigma_sq(2, 1, 1.0, &s, SigmaForm::Printed) - expected).abs() < 1e-15);
        assert_eq!(ddim_sigma_sq(1, 0, 0.1, &s, SigmaForm::Printed), 0.0);
        // Canonical eta = 1 equals the ancestral posterior variance.
        assert!((ddim_sigma_sq(2, 1, 1.0, &s, SigmaForm::Canonical) - s.tilde_beta(2)).abs() < 1e-15);
    }

    #[test]
    fn timestep_subsequence() {
        let ts = implicit_timesteps(20, 1000).unwrap();
        assert_eq!(ts.len(), 20);
        assert_eq!((ts[0], ts[19]), (1, 1000));
        assert!(ts.windows(2).all(|p| p[0] < p[1]));
        assert_eq!(implicit_timesteps(1000, 1000).unwrap(), (1..=1000).collect::<Vec<_>>());
        assert!(implicit_timesteps(0, 10).is_err());
    }

    fn toy_setup(size: usize, k: usize, sched: &NoiseSchedule) -> (GaussianOracleDenoiser, Condition, ImageTensor) {
        let mu = ImageTensor::from_fn(size, size, 1, |i, j, _| ((i + 2 * j) as f64 * 0.4).sin() * 0.5);
        let var = ImageTensor::filled(size, size, 1, 0.05);
        let den = GaussianOracleDenoiser::new(mu.clone(), var, sched.clone()).unwrap();
        let x0 = mu.map(|v| v + 0.1);
        let fm = make_fixed_mask(size, size, k).unwrap();
        let y = project_initial_condition(&backtrack(&x0, k).unwrap(), &fm).unwrap();
        (den, y, x0)
    }

    #[test]
    fn full_fcm_reproduces_grid_condition_exactly() {
        let sched = NoiseSchedule::linear(100, 1e-4, 0.2).unwrap();
        let (den, y, x0) = toy_setup(8, 2, &sched);
        let cfg = DpiConfig { tau: 0, steps: 100, ..DpiConfig::ancestral(0, 1.2, 75.0) };
        let out = dpi_sample(&den, &HoldCondition, &y, &cfg, &sched).unwrap();
        let fm = make_fixed_mask(8, 8, 2).unwrap();
        assert!(crate::metrics::grid_mse(&out.image, &x0, &fm).unwrap() < 1e-20);
        assert_eq!(out.stats.fcm_steps, 100);
        assert!(out.stats.untrained_corrector);
    }

    #[test]
    fn stage_split_call_count_and_determinism() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        let (den, y, _) = toy_setup(8, 2, &sched);
        let counting = CountingDenoiser::new(&den);
        let cfg = DpiConfig { steps: 50, trace_stride: 1, ..DpiConfig::ancestral(20, 1.2, 40.0) };
        let a = dpi_sample(&counting, &HoldCondition, &y, &cfg, &sched).unwrap();
        assert_eq!(counting.calls(), 50);
        assert_eq!((a.stats.fcm_steps, a.stats.racm_steps), (30, 20));
        assert!(a.stats.w_min >= 0.0 && a.stats.w_max <= 0.5 + 1e-12);
        let trace = a.trace.as_ref().unwrap();
        assert_eq!(trace.records.len(), 50);
        assert!(trace.records.windows(2).all(|p| p[0].t > p[1].t));
        assert!(trace.records.iter().all(|r| (r.rule == StepRule::Fcm) == (r.t > 20)));
        let b = dpi_sample(&den, &HoldCondition, &y, &cfg, &sched).unwrap();
        assert_eq!(a.image, b.image);

        let implicit = DpiConfig { eta: 0.0, ..DpiConfig::implicit(10, 4, 1.4, 8.0) };
        let counting = CountingDenoiser::new(&den);
        let c = dpi_sample_ddim(&counting, &IdentityCorrector, &y, &implicit, &sched).unwrap();
        assert_eq!(counting.calls(), 10);
        assert_eq!((c.stats.fcm_steps, c.stats.racm_steps), (6, 4));
        let d = dpi_sample_ddim(&den, &IdentityCorrector, &y, &implicit, &sched).unwrap();
        assert_eq!(c.image, d.image);
    }

    #[test]
    fn invalid_configs() {
        let sched = NoiseSchedule::linear(10, 1e-4, 0.2).unwrap();
        let (den, y, _) = toy_setup(4, 2, &sched);
        let bad_tau = DpiConfig { steps: 10, ..DpiConfig::ancestral(11, 1.0, 10.0) };
        assert!(matches!(dpi_sample(&den, &HoldCondition, &y, &bad_tau, &sched), Err(DpiError::Param { .. })));
        let wrong_steps = DpiConfig { steps: 5, ..DpiConfig::ancestral(1, 1.0, 10.0) };
        assert!(dpi_sample(&den, &HoldCondition, &y, &wrong_steps, &sched).is_err());
        let too_many = DpiConfig::implicit(11, 1, 1.0, 10.0);
        assert!(dpi_sample_ddim(&den, &HoldCondition, &y, &too_many, &sched).is_err());
        let bad_k = DpiConfig { k: 3, ..DpiConfig::implicit(5, 1, 1.0, 10.0) };
        assert!(run(&den, &HoldCondition, &y, &bad_k, &sched).is_err());
    }
}
