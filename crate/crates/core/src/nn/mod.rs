//! Small convolutional building blocks with explicit backward passes.
//!
//! Feature maps are planar `C x H x W` in `f64`. Convolutions are 3x3 with
//! zero padding 1, lowered to matrix products through im2col.

mod gradcheck;
mod params;
mod unet;

pub use gradcheck::{check_gradients, sample_indices, GradSample};
pub use params::{Adam, Ema, ParamSet, TensorSpec};
pub use unet::{UNet, UNetCache, UNetConfig};

use matrixmultiply::dgemm;

#[derive(Debug, Clone, PartialEq)]
pub struct Feat {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Feat {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Feat { c, h, w, d: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, d: Vec<f64>) -> Self {
        assert_eq!(d.len(), c * h * w, "feature buffer length");
        Feat { c, h, w, d }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.pixels();
        &self.d[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.pixels();
        &mut self.d[c * p..(c + 1) * p]
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// `[sin(t f_i), cos(t f_i)]` with `f_i = 10000^(-i / (dim/2))`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * f).sin();
        out[half + i] = (t * f).cos();
    }
    out
}

/// `y = W x + b` with `W` row-major `[out, in]`.
pub fn dense(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

/// Accumulates `dW`, `db` and returns `dx`.
pub fn dense_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = vec![0.0; n_in];
    for (o, g) in dy.iter().enumerate() {
        db[o] += g;
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    dx
}

/// im2col for a 3x3 kernel, padding 1: rows `(ci, ky, kx)`, columns pixels.
pub fn im2col(x: &Feat) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let p = h * w;
    let mut col = vec![0.0; x.c * 9 * p];
    for ci in 0..x.c {
        let src = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * p..][..p];
                for i in 0..h {
                    let ii = i as isize + ky as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let jj = j as isize + kx as isize - 1;
                        if jj >= 0 && jj < w as isize {
                            row[i * w + j] = src[ii as usize * w + jj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize) -> Feat {
    let p = h * w;
    let mut x = Feat::zeros(c, h, w);
    for ci in 0..c {
        let dst = x.channel_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * p..][..p];
                for i in 0..h {
                    let ii = i as isize + ky as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let jj = j as isize + kx as isize - 1;
                        if jj >= 0 && jj < w as isize {
                            dst[ii as usize * w + jj as usize] += row[i * w + j];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 3x3 convolution from a precomputed im2col buffer. `w` is `[co, ci, 3, 3]`.
pub fn conv3x3_col(col: &[f64], ci: usize, h: usize, wd: usize, w: &[f64], b: &[f64]) -> Feat {
    let co = b.len();
    let k = ci * 9;
    let p = h * wd;
    let mut out = Feat::zeros(co, h, wd);
    for (o, bo) in b.iter().enumerate() {
        out.channel_mut(o).fill(*bo);
    }
    unsafe {
        dgemm(co, k, p, 1.0, w.as_ptr(), k as isize, 1, col.as_ptr(), p as isize, 1, 1.0, out.d.as_mut_ptr(), p as isize, 1);
    }
    out
}

pub fn conv3x3(x: &Feat, w: &[f64], b: &[f64]) -> Feat {
    conv3x3_col(&im2col(x), x.c, x.h, x.w, w, b)
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx` is set.
pub fn conv3x3_backward(
    col: &[f64],
    ci: usize,
    w: &[f64],
    dout: &Feat,
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Option<Feat> {
    let co = dout.c;
    let k = ci * 9;
    let p = dout.pixels();
    for (o, g) in db.iter_mut().enumerate() {
        *g += dout.channel(o).iter().sum::<f64>();
    }
    unsafe {
        dgemm(co, p, k, 1.0, dout.d.as_ptr(), p as isize, 1, col.as_ptr(), 1, p as isize, 1.0, dw.as_mut_ptr(), k as isize, 1);
    }
    if !need_dx {
        return None;
    }
    let mut dcol = vec![0.0; k * p];
    unsafe {
        dgemm(k, co, p, 1.0, w.as_ptr(), 1, k as isize, dout.d.as_ptr(), p as isize, 1, 0.0, dcol.as_mut_ptr(), p as isize, 1);
    }
    Some(col2im(&dcol, ci, dout.h, dout.w))
}

pub fn avg_pool2(x: &Feat) -> Feat {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Feat::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                let a = 2 * i * x.w + 2 * j;
                dst[i * w + j] = 0.25 * (src[a] + src[a + 1] + src[a + x.w] + src[a + x.w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &Feat) -> Feat {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Feat::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = dy.channel(c);
        let dst = dx.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = 0.25 * src[(i / 2) * dy.w + j / 2];
            }
        }
    }
    dx
}

pub fn upsample2(x: &Feat) -> Feat {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Feat::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i / 2) * x.w + j / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Feat) -> Feat {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Feat::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = dy.channel(c);
        let dst = dx.channel_mut(c);
        for i in 0..dy.h {
            for j in 0..dy.w {
                dst[(i / 2) * w + j / 2] += src[i * dy.w + j];
            }
        }
    }
    dx
}

pub fn concat(a: &Feat, b: &Feat) -> Feat {
    let mut d = Vec::with_capacity(a.d.len() + b.d.len());
    d.extend_from_slice(&a.d);
    d.extend_from_slice(&b.d);
    Feat::from_vec(a.c + b.c, a.h, a.w, d)
}

pub fn split(x: &Feat, c_first: usize) -> (Feat, Feat) {
    let n = c_first * x.pixels();
    (
        Feat::from_vec(c_first, x.h, x.w, x.d[..n].to_vec()),
        Feat::from_vec(x.c - c_first, x.h, x.w, x.d[n..].to_vec()),
    )
}
