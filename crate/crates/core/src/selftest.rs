//! Fast invariant and oracle suites behind `dpi selftest`.

use std::time::Instant;

use crate::corrector::{CrtModel, HoldCondition};
use crate::degradation::{degrade, DegradationConfig};
use crate::denoiser::{sample_unconditional, GaussianOracleDenoiser};
use crate::error::Result;
use crate::image::ImageTensor;
use crate::io::{net_from_checkpoint, net_to_checkpoint, Checkpoint};
use crate::masks::{backtrack, make_fixed_mask, mask_from_probability, mask_gen, project_initial_condition, ProbabilityMap};
use crate::metrics::psnr;
use crate::nn::{check_gradients, sample_indices};
use crate::rng::{gaussian_image, Domain, RngStreams};
use crate::sampler::{noisy_condition, run, DpiConfig};
use crate::schedule::{forward_sample, predict_x0, NoiseSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn suite(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let start = Instant::now();
    match f() {
        Ok((passed, detail)) => SuiteResult { name, passed, detail: format!("{detail} ({:.2}s)", start.elapsed().as_secs_f64()) },
        Err(e) => SuiteResult { name, passed: false, detail: format!("error: {e}") },
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Runs every suite against `sched`.
pub fn run_suites(sched: &NoiseSchedule) -> Vec<SuiteResult> {
    vec![
        suite("schedule invariants", || schedule_invariants(sched)),
        suite("posterior coefficient identity", || coefficient_identity(sched)),
        suite("forward/predict round trip", || round_trip(sched)),
        suite("conditional posterior identity", || conditional_identity(sched)),
        suite("mask invariants", mask_invariants),
        suite("oracle moments", || oracle_moments(sched)),
        suite("sampler determinism", || determinism(sched)),
        suite("corrector gradients", corrector_gradients),
        suite("degradation identity", degradation_identity),
        suite("checkpoint round trip", checkpoint_round_trip),
    ]
}

/// Suites against the default schedule.
pub fn selftest() -> Vec<SuiteResult> {
    run_suites(&NoiseSchedule::default_linear())
}

/// Suites against a schedule with one perturbed posterior coefficient, to
/// confirm the harness notices.
pub fn selftest_with_fault() -> Vec<SuiteResult> {
    let mut s = NoiseSchedule::default_linear();
    s.inject_coefficient_fault(500, 1e-3);
    run_suites(&s)
}

fn schedule_invariants(s: &NoiseSchedule) -> Result<(bool, String)> {
    let mut prod = 1.0;
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for t in 1..=s.steps() {
        ok &= s.alpha(t) == 1.0 - s.beta(t);
        prod *= s.alpha(t);
        worst = worst.max(rel(prod, s.alpha_bar(t)));
        let prev = if t == 1 { 1.0 } else { s.alpha_bar(t - 1) };
        worst = worst.max((s.tilde_beta(t) - (1.0 - prev) / (1.0 - s.alpha_bar(t)) * s.beta(t)).abs());
        ok &= t == 1 || s.alpha_bar(t) < s.alpha_bar(t - 1);
    }
    Ok((ok && worst < 1e-12, format!("max deviation {worst:.1e}")))
}

fn coefficient_identity(s: &NoiseSchedule) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut at = 0;
    for t in 1..=s.steps() {
        let (c_xt, c_x0) = s.posterior_coefficients(t);
        let prev = if t == 1 { 1.0 } else { s.alpha_bar(t - 1) };
        let e = rel(s.alpha_bar(t).sqrt() * c_xt + c_x0, prev.sqrt());
        if e > worst {
            worst = e;
            at = t;
        }
    }
    Ok((worst < 1e-9, format!("sqrt(ab_t) c_xt + c_x0 = sqrt(ab_t-1), worst rel err {worst:.1e} at t={at}")))
}

fn round_trip(s: &NoiseSchedule) -> Result<(bool, String)> {
    let mut rng = RngStreams::new(1).stream(Domain::Custom(40), 0);
    let mut worst: f64 = 0.0;
    for t in [1, 2, 10, 250, 500, 999, s.steps()] {
        let x0 = gaussian_image(&mut rng, 4, 4, 1);
        let eps = gaussian_image(&mut rng, 4, 4, 1);
        let back = predict_x0(&forward_sample(&x0, t, &eps, s)?, &eps, t, s)?;
        for (a, b) in back.data().iter().zip(x0.data()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    Ok((worst < 1e-9, format!("max rel err {worst:.1e}")))
}

fn conditional_identity(s: &NoiseSchedule) -> Result<(bool, String)> {
    let mut rng = RngStreams::new(2).stream(Domain::Custom(41), 0);
    let fm = make_fixed_mask(8, 8, 2)?;
    let mut worst: f64 = 0.0;
    for t in [1, 30, 300, 700, s.steps()] {
        let y = project_initial_condition(&gaussian_image(&mut rng, 4, 4, 1).clamp(-1.0, 1.0), &fm)?;
        let eps = gaussian_image(&mut rng, 8, 8, 1);
        let back = predict_x0(&noisy_condition(&y, &eps, t, s)?, &eps, t, s)?;
        for (a, b) in back.data().iter().zip(y.values.data()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    Ok((worst < 1e-9, format!("max rel err {worst:.1e}")))
}

fn mask_invariants() -> Result<(bool, String)> {
    let fm = make_fixed_mask(16, 16, 2)?;
    let mut ok = fm.popcount() == 64;
    let streams = RngStreams::new(3);
    let y = project_initial_condition(&gaussian_image(&mut streams.stream(Domain::Custom(42), 0), 8, 8, 1), &fm)?;
    for i in 0..1000 {
        ok &= mask_gen(&y, &fm, 1.2, &mut streams.stream(Domain::AdaptiveMask, i))?.is_subset_of(&fm);
    }
    ok &= backtrack(&y.values, 2)? == backtrack(&project_initial_condition(&backtrack(&y.values, 2)?, &fm)?.values, 2)?;
    let big = make_fixed_mask(200, 200, 2)?;
    let p = ProbabilityMap { height: 100, width: 100, p: vec![0.5; 10_000] };
    let rate = mask_from_probability(&p, &big, 2.0, &mut streams.stream(Domain::Custom(43), 0))?.popcount() as f64 / 10_000.0;
    ok &= (rate - 0.25).abs() <= 0.02;
    Ok((ok, format!("subset over 1000 draws, Bernoulli rate {rate:.4}")))
}

fn oracle_moments(s: &NoiseSchedule) -> Result<(bool, String)> {
    let (mu, var) = (0.3, 0.2);
    let d = GaussianOracleDenoiser::new(ImageTensor::filled(1, 1, 1, mu), ImageTensor::filled(1, 1, 1, var), s.clone())?;
    let n = 2000;
    let xs: Vec<f64> = (0..n)
        .map(|i| sample_unconditional(&d, s, (1, 1, 1), &RngStreams::new(1000 + i), false).map(|x| x.data()[0]))
        .collect::<Result<_>>()?;
    let m = xs.iter().sum::<f64>() / n as f64;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let ok = (m - mu).abs() < 4.0 * se && (v / var - 1.0).abs() < 0.12;
    Ok((ok, format!("mean {m:.4} (target {mu}), var {v:.4} (target {var})")))
}

fn determinism(s: &NoiseSchedule) -> Result<(bool, String)> {
    let fm = make_fixed_mask(8, 8, 2)?;
    let d = GaussianOracleDenoiser::new(ImageTensor::filled(8, 8, 1, 0.1), ImageTensor::filled(8, 8, 1, 0.1), s.clone())?;
    let y = project_initial_condition(&ImageTensor::from_fn(4, 4, 1, |i, j, _| (i as f64 - j as f64) / 4.0), &fm)?;
    let cfg = DpiConfig { eta: 0.0, ..DpiConfig::implicit(20, 7, 1.4, 30.0) };
    let a = run(&d, &HoldCondition, &y, &cfg, s)?.image;
    let b = run(&d, &HoldCondition, &y, &cfg, s)?.image;
    Ok((a == b, "eta = 0 implicit sampling repeated".into()))
}

fn corrector_gradients() -> Result<(bool, String)> {
    let mut m = CrtModel::new(1, 2, 5)?;
    m.net.randomize_all(&mut RngStreams::new(5).stream(Domain::Init, 9), 0.3);
    let mut rng = RngStreams::new(6).stream(Domain::Custom(44), 0);
    let x = crate::nn::Feat::from_vec(1, 4, 4, gaussian_image(&mut rng, 4, 4, 1).data().to_vec());
    let cond = gaussian_image(&mut rng, 4, 4, 1);
    let target = gaussian_image(&mut rng, 4, 4, 1);
    let loss = |net: &crate::nn::UNet| -> f64 {
        let (o, _) = net.forward(&x, 17.0, Some(cond.data())).expect("forward");
        o.d.iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    };
    let (o, cache) = m.net.forward(&x, 17.0, Some(cond.data()))?;
    let dout = crate::nn::Feat::from_vec(1, 4, 4, o.d.iter().zip(target.data()).map(|(a, b)| 2.0 * (a - b)).collect());
    let mut grads = vec![0.0; m.net.param_count()];
    m.net.backward(&cache, &dout, &mut grads);
    let idx = sample_indices(m.net.params().specs(), 40, &mut rng);
    let samples = check_gradients(&mut m.net, |n| n.params_mut().data_mut(), loss, &grads, &idx, 1e-5);
    let worst = samples.iter().map(|g| g.rel_error(1e-6)).fold(0.0, f64::max);
    Ok((worst < 1e-4, format!("{} parameters, worst rel err {worst:.1e}", samples.len())))
}

fn degradation_identity() -> Result<(bool, String)> {
    let img = crate::dataset::toy_faces(1, 32, 7).remove(0);
    let p = psnr(&degrade(&img, &DegradationConfig::identity())?, &img)?;
    Ok((p > 45.0, format!("identity PSNR {p:.2} dB")))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let m = CrtModel::new(1, 2, 8)?;
    let ck = net_to_checkpoint(&m.net, "crt", &[]);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    let net = net_from_checkpoint(&back, "crt")?;
    let again = net_to_checkpoint(&net, "crt", &[]).to_bytes();
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 1;
    let ok = again == bytes && Checkpoint::from_bytes(&bad).is_err();
    Ok((ok, format!("{} bytes", bytes.len())))
}
