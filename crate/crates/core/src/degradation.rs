//! Blind degradation model: blur, downsample, additive noise, JPEG, upsample.
//!
//! `I_L = {[(I_H * k_{s,sigma}) down_r + n_delta]_JPEG_q} up_r`

use rand::Rng;

use crate::error::{DpiError, Result};
use crate::image::ImageTensor;
use crate::jpeg;
use crate::rng::{gaussian, Domain, RngStreams};

const MODULE: &str = "degradation";

/// How `down_r` is realised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DownsampleMode {
    /// Stride-r box average.
    #[default]
    Average,
    /// Bicubic decimation without prefiltering.
    Bicubic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationConfig {
    /// Odd blur kernel size `s`.
    pub blur_ksize: usize,
    pub blur_sigma: f64,
    /// Integer scale factor `r`.
    pub scale: usize,
    /// Noise standard deviation in 8-bit units.
    pub noise_sigma: f64,
    /// JPEG quality in `1..=100`.
    pub jpeg_quality: u8,
    pub downsample: DownsampleMode,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl DegradationConfig {
    /// Closest-to-identity setting: no blur, no scaling, no noise, quality 100.
    pub fn identity() -> Self {
        DegradationConfig {
            blur_ksize: 1,
            blur_sigma: 1e-6,
            scale: 1,
            noise_sigma: 0.0,
            jpeg_quality: 100,
            downsample: DownsampleMode::Average,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_ksize == 0 || self.blur_ksize % 2 == 0 {
            return Err(DpiError::param(MODULE, format!("blur kernel size must be odd, got {}", self.blur_ksize)));
        }
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(DpiError::param(MODULE, "blur sigma must be > 0"));
        }
        if self.scale == 0 {
            return Err(DpiError::param(MODULE, "scale must be >= 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DpiError::param(MODULE, "noise sigma must be >= 0"));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(DpiError::param(MODULE, "jpeg quality must be in 1..=100"));
        }
        Ok(())
    }
}

/// Normalised sampled Gaussian taps of odd length `s`.
pub fn gaussian_kernel(s: usize, sigma: f64) -> Result<Vec<f64>> {
    if s % 2 == 0 {
        return Err(DpiError::param(MODULE, format!("blur kernel size must be odd, got {s}")));
    }
    if !(sigma > 0.0) {
        return Err(DpiError::param(MODULE, "blur sigma must be > 0"));
    }
    let half = (s / 2) as f64;
    let mut k: Vec<f64> = (0..s)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    Ok(k)
}

/// Separable Gaussian blur with replicate padding.
pub fn gaussian_blur(img: &ImageTensor, s: usize, sigma: f64) -> Result<ImageTensor> {
    let k = gaussian_kernel(s, sigma)?;
    let half = (s / 2) as isize;
    let (h, w, c) = img.shape();
    let mut tmp = ImageTensor::zeros(h, w, c);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let jj = (j as isize + t as isize - half).clamp(0, w as isize - 1) as usize;
                    acc += kv * img.get(i, jj, ch);
                }
                tmp.set(i, j, ch, acc);
            }
        }
    }
    let mut out = ImageTensor::zeros(h, w, c);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let ii = (i as isize + t as isize - half).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp.get(ii, j, ch);
                }
                out.set(i, j, ch, acc);
            }
        }
    }
    Ok(out)
}

/// Stride-`r` box averaging.
pub fn downsample(img: &ImageTensor, r: usize) -> Result<ImageTensor> {
    let (h, w, c) = img.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(DpiError::param(MODULE, format!("scale {r} must divide {h}x{w}")));
    }
    let norm = 1.0 / (r * r) as f64;
    Ok(ImageTensor::from_fn(h / r, w / r, c, |i, j, ch| {
        let mut acc = 0.0;
        for a in 0..r {
            for b in 0..r {
                acc += img.get(i * r + a, j * r + b, ch);
            }
        }
        acc * norm
    }))
}

/// Downsampling by `r` with the configured operator.
pub fn downsample_with(img: &ImageTensor, r: usize, mode: DownsampleMode) -> Result<ImageTensor> {
    match mode {
        DownsampleMode::Average => downsample(img, r),
        DownsampleMode::Bicubic => {
            let (h, w, _) = img.shape();
            if r == 0 || h % r != 0 || w % r != 0 {
                return Err(DpiError::param(MODULE, format!("scale {r} must divide {h}x{w}")));
            }
            resize_bicubic(img, h / r, w / r)
        }
    }
}

/// Keys cubic kernel with `a = -0.5` (Catmull-Rom).
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

// Per output coordinate: four (source index, weight) taps, half-pixel centres,
// replicate border.
fn cubic_taps(out_len: usize, in_len: usize) -> Vec<[(usize, f64); 4]> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut taps = [(0usize, 0.0f64); 4];
            for (n, tap) in taps.iter_mut().enumerate() {
                let off = n as isize - 1;
                let idx = (base as isize + off).clamp(0, in_len as isize - 1) as usize;
                *tap = (idx, cubic_weight(frac - off as f64));
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize to `out_h x out_w`, clamped to `[-1, 1]`.
pub fn resize_bicubic(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(DpiError::param(MODULE, "resize target must be non-empty"));
    }
    let (h, w, c) = img.shape();
    let col_taps = cubic_taps(out_w, w);
    let row_taps = cubic_taps(out_h, h);
    let mut tmp = ImageTensor::zeros(h, out_w, c);
    for ch in 0..c {
        for i in 0..h {
            for (j, taps) in col_taps.iter().enumerate() {
                tmp.set(i, j, ch, taps.iter().map(|(s, wt)| wt * img.get(i, *s, ch)).sum());
            }
        }
    }
    let mut out = ImageTensor::zeros(out_h, out_w, c);
    for ch in 0..c {
        for (i, taps) in row_taps.iter().enumerate() {
            for j in 0..out_w {
                let v: f64 = taps.iter().map(|(s, wt)| wt * tmp.get(*s, j, ch)).sum();
                out.set(i, j, ch, v.clamp(-1.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// Bicubic upsampling by an integer factor.
pub fn upsample_bicubic(img: &ImageTensor, r: usize) -> Result<ImageTensor> {
    if r == 0 {
        return Err(DpiError::param(MODULE, "scale must be >= 1"));
    }
    resize_bicubic(img, img.height() * r, img.width() * r)
}

/// Additive Gaussian noise with standard deviation `delta / 127.5`, clamped.
pub fn add_noise<R: Rng + ?Sized>(img: &ImageTensor, delta: f64, rng: &mut R) -> Result<ImageTensor> {
    if !(delta >= 0.0) {
        return Err(DpiError::param(MODULE, "noise sigma must be >= 0"));
    }
    if delta == 0.0 {
        return Ok(img.clone());
    }
    let sd = delta / 127.5;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + sd * gaussian(rng)).clamp(-1.0, 1.0);
    }
    Ok(out)
}

pub fn jpeg_compress(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    jpeg::compress(img, quality)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Blur,
    Downsample,
    Noise,
    Jpeg,
    Upsample,
}

/// Runs the pipeline and returns every intermediate, in application order.
pub fn degrade_stages(hr: &ImageTensor, cfg: &DegradationConfig) -> Result<Vec<(Stage, ImageTensor)>> {
    cfg.validate()?;
    let mut rng = RngStreams::new(cfg.seed).stream(Domain::Degradation, 0);
    let blurred = gaussian_blur(hr, cfg.blur_ksize, cfg.blur_sigma)?;
    let small = downsample_with(&blurred, cfg.scale, cfg.downsample)?;
    let noisy = add_noise(&small, cfg.noise_sigma, &mut rng)?;
    let compressed = jpeg_compress(&noisy, cfg.jpeg_quality)?;
    let up = resize_bicubic(&compressed, hr.height(), hr.width())?;
    Ok(vec![
        (Stage::Blur, blurred),
        (Stage::Downsample, small),
        (Stage::Noise, noisy),
        (Stage::Jpeg, compressed),
        (Stage::Upsample, up),
    ])
}

/// Degrade `hr`; output has the same size as the input.
pub fn degrade(hr: &ImageTensor, cfg: &DegradationConfig) -> Result<ImageTensor> {
    Ok(degrade_stages(hr, cfg)?.pop().expect("five stages").1)
}

/// Inclusive parameter ranges for randomly sampled severe degradations.
#[derive(Debug, Clone, PartialEq)]
pub struct SevereRanges {
    pub scale: (usize, usize),
    pub ksize: (usize, usize),
    pub sigma: (f64, f64),
    pub quality: (u8, u8),
    pub noise: (f64, f64),
}

impl Default for SevereRanges {
    fn default() -> Self {
        SevereRanges { scale: (8, 16), ksize: (1, 17), sigma: (3.0, 20.0), quality: (40, 50), noise: (30.0, 90.0) }
    }
}

impl SevereRanges {
    /// Draws a configuration. With `dims`, the scale is restricted to factors
    /// in range that divide both dimensions.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, dims: Option<(usize, usize)>, seed: u64) -> Result<DegradationConfig> {
        let scales: Vec<usize> = (self.scale.0..=self.scale.1)
            .filter(|r| dims.is_none_or(|(h, w)| h % r == 0 && w % r == 0))
            .collect();
        if scales.is_empty() {
            return Err(DpiError::param(MODULE, "no admissible scale for these dimensions"));
        }
        let odd: Vec<usize> = (self.ksize.0..=self.ksize.1).filter(|s| s % 2 == 1).collect();
        if odd.is_empty() {
            return Err(DpiError::param(MODULE, "no odd kernel size in range"));
        }
        Ok(DegradationConfig {
            scale: scales[rng.random_range(0..scales.len())],
            blur_ksize: odd[rng.random_range(0..odd.len())],
            blur_sigma: rng.random_range(self.sigma.0..=self.sigma.1),
            jpeg_quality: rng.random_range(self.quality.0..=self.quality.1),
            noise_sigma: rng.random_range(self.noise.0..=self.noise.1),
            downsample: DownsampleMode::Average,
            seed,
        })
    }
}
