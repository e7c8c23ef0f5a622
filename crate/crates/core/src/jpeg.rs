//! Block-DCT JPEG approximation: 8-bit quantisation, 8x8 orthonormal DCT,
//! quality-scaled standard luminance table, dequantisation and inverse DCT.
//! Not bit-exact with any codec.

use std::f64::consts::PI;

use crate::error::{DpiError, Result};
use crate::image::ImageTensor;

const MODULE: &str = "degradation";

/// Standard JPEG luminance quantisation table (row-major).
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled table using the conventional IJG scaling.
pub fn quant_table(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (o, base) in t.iter_mut().zip(LUMA_QUANT) {
        *o = ((base as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    t
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    m
}

fn to_byte(x: f64) -> f64 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0)
}

pub fn compress(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    if !(1..=100).contains(&quality) {
        return Err(DpiError::param(MODULE, format!("jpeg quality {quality} outside 1..=100")));
    }
    let table = quant_table(quality);
    let d = dct_matrix();
    let (h, w, c) = img.shape();
    let (bh, bw) = (h.div_ceil(8), w.div_ceil(8));
    let mut out = ImageTensor::zeros(h, w, c);
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for ch in 0..c {
        for by in 0..bh {
            for bx in 0..bw {
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let i = (by * 8 + y).min(h - 1);
                        let j = (bx * 8 + x).min(w - 1);
                        *v = to_byte(img.get(i, j, ch)) - 128.0;
                    }
                }
                // Forward: D * B * D^T.
                for u in 0..8 {
                    for x in 0..8 {
                        tmp[u][x] = (0..8).map(|y| d[u][y] * block[y][x]).sum();
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let coef: f64 = (0..8).map(|x| tmp[u][x] * d[v][x]).sum();
                        let q = table[u * 8 + v];
                        block[u][v] = (coef / q).round() * q;
                    }
                }
                // Inverse: D^T * C * D.
                for y in 0..8 {
                    for v in 0..8 {
                        tmp[y][v] = (0..8).map(|u| d[u][y] * block[u][v]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let i = by * 8 + y;
                        let j = bx * 8 + x;
                        if i < h && j < w {
                            let p: f64 = (0..8).map(|v| tmp[y][v] * d[v][x]).sum();
                            let byte = (p + 128.0).round().clamp(0.0, 255.0);
                            out.set(i, j, ch, byte / 127.5 - 1.0);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_scaling() {
        assert!(quant_table(100).iter().all(|v| *v == 1.0));
        assert_eq!(quant_table(50)[0], 16.0);
        assert_eq!(quant_table(10)[0], 80.0);
    }

    #[test]
    fn dct_is_orthonormal() {
        let d = dct_matrix();
        for a in 0..8 {
            for b in 0..8 {
                let dot: f64 = (0..8).map(|k| d[a][k] * d[b][k]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn odd_sizes_keep_shape() {
        let img = ImageTensor::from_fn(5, 11, 1, |i, j, _| ((i * j) % 7) as f64 / 7.0 - 0.5);
        let out = compress(&img, 75).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(compress(&img, 0).is_err());
    }
}
