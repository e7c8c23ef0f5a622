//! Procedural datasets: grayscale toy faces and diagonal-Gaussian images.

use rand::Rng;

use crate::image::ImageTensor;
use crate::rng::{gaussian, Domain, RngStreams};

const SUPERSAMPLE: usize = 4;

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

/// One toy face: background, head ellipse, two eyes, nose and mouth, with
/// randomised geometry and intensities. Edges are anti-aliased by 4x4
/// supersampling. Values lie in `[-1, 1]`.
pub fn toy_face<R: Rng + ?Sized>(rng: &mut R, size: usize) -> ImageTensor {
    let s = size as f64;
    let background = rng.random_range(-0.95..-0.35);
    let grad = rng.random_range(-0.15..0.15);
    let cy = s / 2.0 + rng.random_range(-0.06..0.06) * s;
    let cx = s / 2.0 + rng.random_range(-0.06..0.06) * s;
    let head_val = rng.random_range(0.05..0.75);
    let head = Ellipse {
        cy,
        cx,
        ry: rng.random_range(0.34..0.44) * s,
        rx: rng.random_range(0.26..0.35) * s,
        value: head_val,
    };
    let eye_dy = rng.random_range(0.08..0.16) * s;
    let eye_dx = rng.random_range(0.11..0.17) * s;
    let eye_r = rng.random_range(0.045..0.075) * s;
    let eye_val = rng.random_range(-0.95..-0.5);
    let eyes = [-1.0, 1.0].map(|side| Ellipse {
        cy: cy - eye_dy,
        cx: cx + side * eye_dx,
        ry: eye_r * 0.8,
        rx: eye_r,
        value: eye_val,
    });
    let nose = Ellipse {
        cy: cy + rng.random_range(0.0..0.05) * s,
        cx,
        ry: rng.random_range(0.05..0.09) * s,
        rx: rng.random_range(0.025..0.04) * s,
        value: head_val - rng.random_range(0.15..0.35),
    };
    let mouth = Ellipse {
        cy: cy + rng.random_range(0.15..0.22) * s,
        cx: cx + rng.random_range(-0.02..0.02) * s,
        ry: rng.random_range(0.025..0.05) * s,
        rx: rng.random_range(0.08..0.15) * s,
        value: rng.random_range(-0.9..-0.3),
    };
    let layers = [&head, &eyes[0], &eyes[1], &nose, &mouth];

    ImageTensor::from_fn(size, size, 1, |i, j, _| {
        let mut acc = 0.0;
        for a in 0..SUPERSAMPLE {
            for b in 0..SUPERSAMPLE {
                let y = i as f64 + (a as f64 + 0.5) / SUPERSAMPLE as f64;
                let x = j as f64 + (b as f64 + 0.5) / SUPERSAMPLE as f64;
                let mut v = background + grad * (y / s - 0.5);
                for e in layers {
                    if e.contains(y, x) {
                        v = e.value;
                    }
                }
                acc += v;
            }
        }
        (acc / (SUPERSAMPLE * SUPERSAMPLE) as f64).clamp(-1.0, 1.0)
    })
}

/// `n` faces of `size x size`; face `i` depends only on `(seed, i)`.
pub fn toy_faces(n: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    let streams = RngStreams::new(seed);
    (0..n).map(|i| toy_face(&mut streams.stream(Domain::Dataset, i as u64), size)).collect()
}

/// Draws of a pixelwise independent Gaussian with the given mean and variance images.
pub fn gaussian_images(n: usize, mu0: &ImageTensor, var0: &ImageTensor, seed: u64) -> Vec<ImageTensor> {
    let streams = RngStreams::new(seed);
    (0..n)
        .map(|i| {
            let mut rng = streams.stream(Domain::Dataset, i as u64);
            let mut img = mu0.clone();
            for (x, v) in img.data_mut().iter_mut().zip(var0.data()) {
                *x += v.sqrt() * gaussian(&mut rng);
            }
            img
        })
        .collect()
}
