//! Full-reference quality metrics and the grid-restricted consistency error.
//!
//! PSNR and SSIM are computed on the 8-bit scale (`(x + 1) * 127.5`) over
//! luminance. SSIM uses an 11x11 Gaussian window with sigma 1.5 and the usual
//! constants `C1 = (0.01 * 255)^2`, `C2 = (0.03 * 255)^2`, valid windows only.

use std::fmt::Write as _;

use crate::error::{DpiError, Result};
use crate::image::ImageTensor;
use crate::masks::FixedMask;

const MODULE: &str = "eval_metrics";

/// Reported PSNR for identical images.
pub const PSNR_IDENTICAL_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn to_8bit_luma(img: &ImageTensor) -> Vec<f64> {
    img.luminance().data().iter().map(|v| (v + 1.0) * 127.5).collect()
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.check_same_shape(b, MODULE)?;
    let (x, y) = (to_8bit_luma(a), to_8bit_luma(b));
    let mse = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL_DB);
    }
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_IDENTICAL_DB))
}

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let z: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= z);
    taps
}

// Separable "valid" filtering of an h x w plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|k| taps[k] * src[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|k| taps[k] * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 windows of the luminance planes.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.check_same_shape(b, MODULE)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(DpiError::param(MODULE, format!("SSIM needs at least 11x11, got {h}x{w}")));
    }
    let (x, y) = (to_8bit_luma(a), to_8bit_luma(b));
    let taps = ssim_taps();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let sxx = filter_valid(&xx, h, w, &taps);
    let syy = filter_valid(&yy, h, w, &taps);
    let sxy = filter_valid(&xy, h, w, &taps);
    let mut total = 0.0;
    for p in 0..mx.len() {
        let (ux, uy) = (mx[p], my[p]);
        let vx = sxx[p] - ux * ux;
        let vy = syy[p] - uy * uy;
        let cxy = sxy[p] - ux * uy;
        total += ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
    }
    Ok(total / mx.len() as f64)
}

/// MSE restricted to the fixed-grid support (all channels).
pub fn grid_mse(sr: &ImageTensor, gt: &ImageTensor, fm: &FixedMask) -> Result<f64> {
    sr.check_same_shape(gt, MODULE)?;
    fm.check_image(sr)?;
    let support = fm.popcount();
    if support == 0 {
        return Err(DpiError::param(MODULE, "empty mask support"));
    }
    let mut acc = 0.0;
    for c in 0..sr.channels() {
        for ((a, b), m) in sr.plane(c).iter().zip(gt.plane(c)).zip(fm.bits()) {
            if *m {
                acc += (a - b) * (a - b);
            }
        }
    }
    Ok(acc / (support * sr.channels()) as f64)
}

/// One evaluated pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub grid_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, sr: &ImageTensor, gt: &ImageTensor, fm: &FixedMask) -> Result<()> {
        self.rows.push(MetricRow {
            name: name.into(),
            psnr: psnr(sr, gt)?,
            ssim: ssim(sr, gt)?,
            grid_mse: grid_mse(sr, gt, fm)?,
        });
        Ok(())
    }

    /// Arithmetic mean of every column.
    pub fn aggregate(&self) -> Option<MetricRow> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        Some(MetricRow {
            name: "mean".into(),
            psnr: self.rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: self.rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            grid_mse: self.rows.iter().map(|r| r.grid_mse).sum::<f64>() / n,
        })
    }

    /// Header, one line per pair, then the aggregate row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr_db,ssim,grid_mse\n");
        for r in self.rows.iter().chain(self.aggregate().as_ref()) {
            let _ = writeln!(s, "{},{:.6},{:.8},{:.10}", r.name, r.psnr, r.ssim, r.grid_mse);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in self.rows.iter().chain(self.aggregate().as_ref()) {
            let _ = writeln!(s, "{:<24} PSNR {:>7.3} dB  SSIM {:.4}  grid-MSE {:.6}", r.name, r.psnr, r.ssim, r.grid_mse);
        }
        s
    }
}
