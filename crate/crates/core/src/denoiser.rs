//! Denoiser contract, the analytic Gaussian oracle and a small trainable
//! noise-prediction network.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::error::{DpiError, Result};
use crate::image::ImageTensor;
use crate::nn::{Feat, UNet, UNetConfig};
use crate::rng::{gaussian_image, Domain, RngStreams};
use crate::schedule::{clipped_prediction, forward_sample, reverse_step, DenoiserOutput, NoiseSchedule};
use crate::train::{fit, TrainConfig, TrainOutcome};

const MODULE: &str = "denoiser";

/// `eps_theta(x_t, t)` plus an optional variance interpolation.
pub trait Denoiser: Sync {
    fn evaluate(&self, x_t: &ImageTensor, t: usize) -> Result<DenoiserOutput>;

    fn kind(&self) -> &str;

    fn param_count(&self) -> usize {
        0
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn evaluate(&self, x_t: &ImageTensor, t: usize) -> Result<DenoiserOutput> {
        (**self).evaluate(x_t, t)
    }

    fn kind(&self) -> &str {
        (**self).kind()
    }

    fn param_count(&self) -> usize {
        (**self).param_count()
    }
}

/// Exact noise predictor for pixelwise independent `N(mu0, var0)` data.
#[derive(Debug, Clone)]
pub struct GaussianOracleDenoiser {
    pub mu0: ImageTensor,
    pub var0: ImageTensor,
    sched: NoiseSchedule,
}

impl GaussianOracleDenoiser {
    pub fn new(mu0: ImageTensor, var0: ImageTensor, sched: NoiseSchedule) -> Result<Self> {
        mu0.check_same_shape(&var0, MODULE)?;
        if var0.data().iter().any(|v| !(*v > 0.0)) {
            return Err(DpiError::param(MODULE, "oracle variance must be > 0 everywhere"));
        }
        Ok(GaussianOracleDenoiser { mu0, var0, sched })
    }

    /// Per-pixel moments estimated from a set of images; variance floored at `min_var`.
    pub fn fit_moments(images: &[ImageTensor], min_var: f64, sched: NoiseSchedule) -> Result<Self> {
        let first = images.first().ok_or_else(|| DpiError::data(MODULE, "no images to fit"))?;
        let n = images.len() as f64;
        let mut mu = ImageTensor::zeros(first.height(), first.width(), first.channels());
        for img in images {
            first.check_same_shape(img, MODULE)?;
            mu = &mu + img;
        }
        let mu = mu.map(|v| v / n);
        let mut var = ImageTensor::zeros(mu.height(), mu.width(), mu.channels());
        for img in images {
            var = &var + &(img - &mu).map(|d| d * d);
        }
        let var = var.map(|v| (v / n).max(min_var));
        Self::new(mu, var, sched)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }
}

/// `E[x0 | x_t] = (sqrt(ab) var0 x_t + (1 - ab) mu0) / (ab var0 + 1 - ab)`.
pub fn oracle_posterior_mean(d: &GaussianOracleDenoiser, x_t: &ImageTensor, t: usize, sched: &NoiseSchedule) -> Result<ImageTensor> {
    x_t.check_same_shape(&d.mu0, MODULE)?;
    let ab = sched.alpha_bar(t);
    let mut out = x_t.clone();
    for ((o, m), v) in out.data_mut().iter_mut().zip(d.mu0.data()).zip(d.var0.data()) {
        *o = (ab.sqrt() * v * *o + (1.0 - ab) * m) / (ab * v + 1.0 - ab);
    }
    Ok(out)
}

/// `eps = (x_t - sqrt(ab) E[x0 | x_t]) / sqrt(1 - ab)`, fixed variance.
pub fn oracle_eps(d: &GaussianOracleDenoiser, x_t: &ImageTensor, t: usize, sched: &NoiseSchedule) -> Result<DenoiserOutput> {
    if t == 0 || t > sched.steps() {
        return Err(DpiError::param(MODULE, format!("timestep {t} outside 1..={}", sched.steps())));
    }
    let ab = sched.alpha_bar(t);
    let m = oracle_posterior_mean(d, x_t, t, sched)?;
    Ok(DenoiserOutput::fixed(x_t.lin_comb(1.0 / (1.0 - ab).sqrt(), &m, -ab.sqrt() / (1.0 - ab).sqrt())))
}

impl Denoiser for GaussianOracleDenoiser {
    fn evaluate(&self, x_t: &ImageTensor, t: usize) -> Result<DenoiserOutput> {
        oracle_eps(self, x_t, t, &self.sched)
    }

    fn kind(&self) -> &str {
        "gaussian-oracle"
    }
}

/// Counts evaluations of a wrapped denoiser.
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicUsize,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        CountingDenoiser { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn evaluate(&self, x_t: &ImageTensor, t: usize) -> Result<DenoiserOutput> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(x_t, t)
    }

    fn kind(&self) -> &str {
        self.inner.kind()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

pub(crate) fn to_feat(img: &ImageTensor) -> Feat {
    Feat::from_vec(img.channels(), img.height(), img.width(), img.data().to_vec())
}

pub(crate) fn from_feat(f: Feat) -> Result<ImageTensor> {
    ImageTensor::from_vec(f.h, f.w, f.c, f.d)
        .map_err(|_| DpiError::numerical(MODULE, "network produced a non-finite value"))
}

/// Noise-prediction network with fixed reverse variance.
#[derive(Debug, Clone)]
pub struct TinyDenoiser {
    pub net: UNet,
}

impl TinyDenoiser {
    pub fn new(channels: usize, base: usize, seed: u64) -> Result<Self> {
        let mut net = UNet::new(UNetConfig { in_ch: channels, out_ch: channels, base, cond: false })?;
        net.init(&mut RngStreams::new(seed).stream(Domain::Init, 0), true);
        Ok(TinyDenoiser { net })
    }

    pub fn from_net(net: UNet) -> Result<Self> {
        let c = net.config();
        if c.cond || c.in_ch != c.out_ch {
            return Err(DpiError::param(MODULE, "denoiser network must map C channels to C without condition"));
        }
        Ok(TinyDenoiser { net })
    }

    pub fn channels(&self) -> usize {
        self.net.config().in_ch
    }
}

impl Denoiser for TinyDenoiser {
    fn evaluate(&self, x_t: &ImageTensor, t: usize) -> Result<DenoiserOutput> {
        let (out, _) = self.net.forward(&to_feat(x_t), t as f64, None)?;
        Ok(DenoiserOutput::fixed(from_feat(out)?))
    }

    fn kind(&self) -> &str {
        "tiny-unet"
    }

    fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

/// `mean ||eps - eps_theta(x_t, t)||^2` for one image; accumulates its gradient.
pub fn simple_loss_and_grad(net: &UNet, x0: &ImageTensor, t: usize, eps: &ImageTensor, sched: &NoiseSchedule, grads: Option<&mut [f64]>) -> Result<f64> {
    let x_t = forward_sample(x0, t, eps, sched)?;
    let (out, cache) = net.forward(&to_feat(&x_t), t as f64, None)?;
    let n = out.d.len() as f64;
    let diff: Vec<f64> = out.d.iter().zip(eps.data()).map(|(a, b)| a - b).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    if let Some(g) = grads {
        let dout = Feat::from_vec(out.c, out.h, out.w, diff.iter().map(|d| 2.0 * d / n).collect());
        net.backward(&cache, &dout, g);
    }
    Ok(loss)
}

/// Fits a [`TinyDenoiser`] with the simplified noise-prediction loss.
pub fn train_tiny_denoiser(data: &[ImageTensor], sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let first = data.first().ok_or_else(|| DpiError::data(MODULE, "empty dataset"))?;
    let net = TinyDenoiser::new(first.channels(), cfg.base, cfg.seed)?.net;
    let (h, w, c) = first.shape();
    fit(net, data.len(), cfg, |net, item, rng, grads| {
        let t = rng.random_range(1..=sched.steps());
        let eps = gaussian_image(rng, h, w, c);
        simple_loss_and_grad(net, &data[item], t, &eps, sched, Some(grads))
    })
}

/// Mean simplified loss over `data` with seeded `(t, eps)` draws.
pub fn evaluate_simple_loss(d: &TinyDenoiser, data: &[ImageTensor], sched: &NoiseSchedule, seed: u64) -> Result<f64> {
    let streams = RngStreams::new(seed);
    let mut total = 0.0;
    for (i, x0) in data.iter().enumerate() {
        let mut rng = streams.stream(Domain::Custom(2), i as u64);
        let t = rng.random_range(1..=sched.steps());
        let eps = gaussian_image(&mut rng, x0.height(), x0.width(), x0.channels());
        total += simple_loss_and_grad(&d.net, x0, t, &eps, sched, None)?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Full ancestral chain from `x_T ~ N(0, I)`.
pub fn sample_unconditional<D: Denoiser + ?Sized>(
    den: &D,
    sched: &NoiseSchedule,
    shape: (usize, usize, usize),
    streams: &RngStreams,
    clip_x0: bool,
) -> Result<ImageTensor> {
    let (h, w, c) = shape;
    let mut x = gaussian_image(&mut streams.stream(Domain::InitNoise, 0), h, w, c);
    for t in (1..=sched.steps()).rev() {
        let mut out = den.evaluate(&x, t)?;
        if clip_x0 {
            out.eps = clipped_prediction(&x, &out.eps, t, sched)?.1;
        }
        let z = gaussian_image(&mut streams.stream(Domain::StepNoise, t as u64), h, w, c);
        x = reverse_step(&x, &out, t, sched, &z)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::predict_x0;

    fn oracle(mu: f64, var: f64, sched: &NoiseSchedule) -> GaussianOracleDenoiser {
        GaussianOracleDenoiser::new(ImageTensor::filled(1, 1, 1, mu), ImageTensor::filled(1, 1, 1, var), sched.clone()).unwrap()
    }

    #[test]
    fn oracle_hand_value() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        let d = oracle(0.0, 1.0, &s);
        let x = ImageTensor::filled(1, 1, 1, 1.0);
        let ab: f64 = 0.72;
        let e = oracle_posterior_mean(&d, &x, 2, &s).unwrap().data()[0];
        assert!((e - ab.sqrt()).abs() < 1e-12);
        let eps = d.evaluate(&x, 2).unwrap().eps.data()[0];
        assert!((eps - (1.0 - ab.sqrt() * ab.sqrt()) / (1.0 - ab).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn oracle_limits_and_exactness() {
        let s = NoiseSchedule::default_linear();
        let t = 400;
        let ab = s.alpha_bar(t);
        let sym = ImageTensor::filled(1, 1, 1, ab.sqrt() * 0.3);
        let d = oracle(0.3, 0.5, &s);
        assert!(d.evaluate(&sym, t).unwrap().eps.data()[0].abs() < 1e-12);
        let flat = oracle(0.3, 1e12, &s);
        assert!(flat.evaluate(&ImageTensor::filled(1, 1, 1, 0.7), t).unwrap().eps.data()[0].abs() < 1e-6);
        let x = ImageTensor::filled(1, 1, 1, -0.4);
        let x0 = predict_x0(&x, &d.evaluate(&x, t).unwrap().eps, t, &s).unwrap();
        assert!((x0.data()[0] - oracle_posterior_mean(&d, &x, t, &s).unwrap().data()[0]).abs() < 1e-10);
        assert!(GaussianOracleDenoiser::new(ImageTensor::zeros(1, 1, 1), ImageTensor::zeros(1, 1, 1), s).is_err());
    }

    #[test]
    fn single_step_chain_is_posterior_mean() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        let d = oracle(0.2, 0.3, &s);
        let streams = RngStreams::new(4);
        let out = sample_unconditional(&d, &s, (1, 1, 1), &streams, false).unwrap();
        let xt = gaussian_image(&mut streams.stream(Domain::InitNoise, 0), 1, 1, 1);
        let expected = oracle_posterior_mean(&d, &xt, 1, &s).unwrap();
        assert!((out.data()[0] - expected.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn untrained_loss_near_one_and_pure() {
        let s = NoiseSchedule::default_linear();
        let d = TinyDenoiser::new(1, 4, 1).unwrap();
        let data = crate::dataset::toy_faces(8, 16, 2);
        let l = evaluate_simple_loss(&d, &data, &s, 3).unwrap();
        assert!((l - 1.0).abs() < 0.15, "{l}");
        let x = &data[0];
        assert_eq!(d.evaluate(x, 7).unwrap(), d.evaluate(x, 7).unwrap());
    }

    #[test]
    fn counting_wrapper() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let d = CountingDenoiser::new(oracle(0.0, 1.0, &s));
        sample_unconditional(&d, &s, (1, 1, 1), &RngStreams::new(0), false).unwrap();
        assert_eq!(d.calls(), 10);
    }
}
