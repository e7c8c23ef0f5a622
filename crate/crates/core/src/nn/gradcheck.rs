//! Central finite-difference checks for hand-written gradients.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Perturbs each listed parameter by `+-h` and compares the central
/// difference of `loss` with `analytic[index]`.
pub fn check_gradients<M>(
    model: &mut M,
    params: impl Fn(&mut M) -> &mut [f64],
    loss: impl Fn(&M) -> f64,
    analytic: &[f64],
    indices: &[usize],
    h: f64,
) -> Vec<GradSample> {
    indices
        .iter()
        .map(|&index| {
            let orig = params(model)[index];
            params(model)[index] = orig + h;
            let lp = loss(model);
            params(model)[index] = orig - h;
            let lm = loss(model);
            params(model)[index] = orig;
            GradSample { index, analytic: analytic[index], numeric: (lp - lm) / (2.0 * h) }
        })
        .collect()
}

/// Indices covering every tensor at least once, then filled up uniformly.
pub fn sample_indices<R: rand::Rng + ?Sized>(specs: &[super::TensorSpec], n: usize, rng: &mut R) -> Vec<usize> {
    let total: usize = specs.iter().map(|s| s.len()).sum();
    let mut idx: Vec<usize> = specs.iter().filter(|s| !s.is_empty()).map(|s| s.offset + rng.random_range(0..s.len())).collect();
    while idx.len() < n {
        idx.push(rng.random_range(0..total));
    }
    idx
}
