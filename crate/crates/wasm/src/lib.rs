use dpi_core::corrector::{initial_condition, Corrector, CrtModel, HoldCondition};
use dpi_core::dataset::toy_faces;
use dpi_core::degradation::{degrade_stages, upsample_bicubic, DegradationConfig, DownsampleMode, Stage};
use dpi_core::denoiser::{Denoiser, GaussianOracleDenoiser, TinyDenoiser};
use dpi_core::io::{from_byte, net_from_checkpoint, to_byte, Checkpoint};
use dpi_core::masks::{backtrack, edge_probability_map, make_fixed_mask, mask_gen};
use dpi_core::rng::{Domain, RngStreams};
use dpi_core::sampler::{run, DpiConfig, SigmaForm};
use dpi_core::{ImageTensor, NoiseSchedule};
use wasm_bindgen::prelude::*;

fn err(e: dpi_core::DpiError) -> JsError {
    JsError::new(&e.to_string())
}

fn to_image(pixels: &[u8], size: usize) -> Result<ImageTensor, JsError> {
    if pixels.len() != size * size {
        return Err(JsError::new(&format!("expected {} pixels, got {}", size * size, pixels.len())));
    }
    ImageTensor::from_vec(size, size, 1, pixels.iter().map(|v| from_byte(*v)).collect()).map_err(err)
}

fn to_bytes(img: &ImageTensor) -> Vec<u8> {
    img.data().iter().map(|v| to_byte(*v)).collect()
}

/// A procedurally generated face, `size` x `size` grayscale bytes.
#[wasm_bindgen]
pub fn toy_face(size: usize, seed: u32) -> Vec<u8> {
    to_bytes(&toy_faces(1, size, seed as u64)[0])
}

/// Blur, downsample by `scale`, add noise and JPEG-compress. Returns the
/// low-resolution image, `(size / scale)^2` bytes.
#[wasm_bindgen]
pub fn degrade_image(pixels: &[u8], size: usize, scale: usize, blur_sigma: f64, noise: f64, quality: u8, seed: u32) -> Result<Vec<u8>, JsError> {
    let img = to_image(pixels, size)?;
    let ksize = if blur_sigma > 0.0 { 2 * (2.0 * blur_sigma).ceil() as usize + 1 } else { 1 };
    let cfg = DegradationConfig {
        blur_ksize: ksize,
        blur_sigma: blur_sigma.max(1e-6),
        scale,
        noise_sigma: noise,
        jpeg_quality: quality,
        downsample: DownsampleMode::Bicubic,
        seed: seed as u64,
    };
    cfg.validate().map_err(err)?;
    let stages = degrade_stages(&img, &cfg).map_err(err)?;
    Ok(to_bytes(&stages.into_iter().find(|(s, _)| *s == Stage::Jpeg).expect("jpeg stage").1))
}

/// Bicubic upsampling of a low-resolution image by `scale`.
#[wasm_bindgen]
pub fn bicubic(lr: &[u8], lr_size: usize, scale: usize) -> Result<Vec<u8>, JsError> {
    Ok(to_bytes(&upsample_bicubic(&to_image(lr, lr_size)?, scale).map_err(err)?))
}

/// Three full-resolution planes, concatenated: the initial grid condition,
/// the edge probability map `p^s` on the grid, and one adaptive mask draw.
#[wasm_bindgen]
pub fn condition_masks(lr: &[u8], lr_size: usize, scale: usize, k: usize, s: f64, seed: u32) -> Result<Vec<u8>, JsError> {
    let size = lr_size * scale;
    let fm = make_fixed_mask(size, size, k).map_err(err)?;
    let y = initial_condition(&to_image(lr, lr_size)?, &fm).map_err(err)?;
    let p = edge_probability_map(&backtrack(&y.values, k).map_err(err)?);
    let mut rng = RngStreams::new(seed as u64).stream(Domain::AdaptiveMask, 0);
    let am = mask_gen(&y, &fm, s, &mut rng).map_err(err)?;
    let mut out = Vec::with_capacity(3 * size * size);
    out.extend(y.values.data().iter().enumerate().map(|(i, v)| if fm.bits()[i] { to_byte(*v) } else { 0 }));
    out.extend((0..size * size).map(|i| {
        let (r, c) = (i / size, i % size);
        if r % k == 0 && c % k == 0 {
            (p.get(r / k, c / k).powf(s) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out.extend(am.bits().iter().map(|b| if *b { 255 } else { 0 }));
    Ok(out)
}

/// Denoiser and corrector pair used by [`Restorer::restore`].
#[wasm_bindgen]
pub struct Restorer {
    denoiser: Box<dyn Denoiser>,
    corrector: Box<dyn Corrector>,
    sched: NoiseSchedule,
}

#[wasm_bindgen]
impl Restorer {
    /// Gaussian oracle fitted to `n` toy faces, with the condition held fixed.
    pub fn oracle(size: usize, n: usize, seed: u32) -> Result<Restorer, JsError> {
        let sched = NoiseSchedule::default_linear();
        let den = GaussianOracleDenoiser::fit_moments(&toy_faces(n.max(2), size, seed as u64), 1e-4, sched.clone()).map_err(err)?;
        Ok(Restorer { denoiser: Box::new(den), corrector: Box::new(HoldCondition), sched })
    }

    /// Trained checkpoints as written by `dpi train-denoiser` and `dpi train-crt`.
    /// An empty corrector buffer holds the condition fixed.
    pub fn from_checkpoints(denoiser: &[u8], corrector: &[u8]) -> Result<Restorer, JsError> {
        let den = TinyDenoiser::from_net(net_from_checkpoint(&Checkpoint::from_bytes(denoiser).map_err(err)?, "tiny-unet").map_err(err)?).map_err(err)?;
        let corrector: Box<dyn Corrector> = if corrector.is_empty() {
            Box::new(HoldCondition)
        } else {
            Box::new(CrtModel::from_net(net_from_checkpoint(&Checkpoint::from_bytes(corrector).map_err(err)?, "crt").map_err(err)?).map_err(err)?)
        };
        Ok(Restorer { denoiser: Box::new(den), corrector, sched: NoiseSchedule::default_linear() })
    }

    pub fn kind(&self) -> String {
        format!("{} + {}", self.denoiser.kind(), self.corrector.kind())
    }

    /// Implicit two-stage sampling from a low-resolution image.
    #[allow(clippy::too_many_arguments)]
    pub fn restore(&self, lr: &[u8], lr_size: usize, scale: usize, steps: usize, tau: usize, s: f64, omega: f64, seed: u32) -> Result<Vec<u8>, JsError> {
        let size = lr_size * scale;
        let fm = make_fixed_mask(size, size, 2).map_err(err)?;
        let y = initial_condition(&to_image(lr, lr_size)?, &fm).map_err(err)?;
        let cfg = DpiConfig { seed: seed as u64, sigma_form: SigmaForm::Canonical, ..DpiConfig::implicit(steps, tau, s, omega) };
        let out = run(self.denoiser.as_ref(), self.corrector.as_ref(), &y, &cfg, &self.sched).map_err(err)?;
        Ok(to_bytes(&out.image))
    }
}
