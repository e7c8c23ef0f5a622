use rand::Rng;

use crate::error::{DpiError, Result};
use crate::rng::gaussian;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named tensors stored in one flat buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    specs: Vec<TensorSpec>,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a zero tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.data.len();
        let spec = TensorSpec { name: name.into(), shape: shape.to_vec(), offset };
        self.data.resize(offset + spec.len(), 0.0);
        self.specs.push(spec);
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, id: usize) -> &[f64] {
        let s = &self.specs[id];
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut [f64] {
        let s = &self.specs[id];
        let r = s.offset..s.offset + s.len();
        &mut self.data[r]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Fills tensor `id` with `N(0, std^2)` draws.
    pub fn randomize<R: Rng + ?Sized>(&mut self, id: usize, std: f64, rng: &mut R) {
        for v in self.tensor_mut(id) {
            *v = std * gaussian(rng);
        }
    }

    /// Replaces all values from `other`, which must share the layout.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.specs != other.specs {
            return Err(DpiError::shape("nn", "parameter layouts differ"));
        }
        self.data.copy_from_slice(&other.data);
        Ok(())
    }

    /// Rounds every value through `f32`, as stored in checkpoints.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Exponential moving average of a parameter trajectory.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    shadow: Vec<f64>,
}

impl Ema {
    pub fn new(initial: &[f64], decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(DpiError::param("nn", format!("EMA decay must be in (0, 1), got {decay}")));
        }
        Ok(Ema { decay, shadow: initial.to_vec() })
    }

    pub fn update(&mut self, params: &[f64]) {
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (1.0 - d) * p;
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.shadow
    }
}
