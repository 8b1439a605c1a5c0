use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept in `f64`-convertible `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self { config, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    /// Rebuild from saved moments and step count.
    pub fn from_state(config: AdamConfig, m: Vec<T>, v: Vec<T>, t: u64) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Incompatible("moment vectors differ in length".into()));
        }
        Ok(Self { config, m, v, t })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.step_lr(params, grad, self.config.lr);
    }

    pub fn step_lr(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - Float::powi(c.beta1, self.t as i32);
        let bc2 = 1.0 - Float::powi(c.beta2, self.t as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + ob1 * g;
            self.v[i] = b2 * self.v[i] + ob2 * g * g;
            params[i] -= step * self.m[i] / ((self.v[i] * inv_bc2).sqrt() + eps);
        }
    }
}

/// Scale `grad` so its L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Real>(grad: &mut [T], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>();
    let norm = Float::sqrt(norm);
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}
