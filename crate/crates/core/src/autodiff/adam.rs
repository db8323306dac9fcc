//! Bias-corrected Adam.

use crate::autodiff::param::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Zero moments sized to every parameter in `store`.
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    ///
    /// Fails without touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFinite { context: format!("gradient of parameter {:?}", p.name) });
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let correct1 = T::of(1.0 - c.beta1.powi(t));
        let correct2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / correct1;
                let v_hat = *vi / correct2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
