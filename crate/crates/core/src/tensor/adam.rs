//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig, params: &ParamStore<F>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients in `params`.
    pub fn step(&mut self, params: &mut ParamStore<F>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let bc1 = F::of(1.0 - c.beta1.powi(t));
        let bc2 = F::of(1.0 - c.beta2.powi(t));
        let lr = F::of(c.lr);
        let eps = F::of(c.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((w, &g), mi), vi) in value
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Lcg64;
    use crate::tensor::Init;

    fn one_step(g: f64) -> f64 {
        let mut rng = Lcg64::new(0);
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", &[1, 1], Init::Zeros, &mut rng).unwrap();
        store.get_mut(id).grad.fill(g);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        adam.step(&mut store);
        store.get(id).value.item()
    }

    #[test]
    fn first_step_closed_form() {
        // bias-corrected first step is -lr * g / (|g| + eps)
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((one_step(1.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        assert_eq!(one_step(0.0), 0.0);
    }

    #[test]
    fn first_step_magnitude_is_scale_free() {
        assert!((one_step(10.0).abs() - one_step(0.1).abs()).abs() < 1e-9);
    }

    #[test]
    fn step_counter_increments() {
        let mut rng = Lcg64::new(0);
        let mut store = ParamStore::<f32>::new();
        store.add("w", &[2, 2], Init::Glorot, &mut rng).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        for t in 1..=3 {
            adam.step(&mut store);
            assert_eq!(adam.step_count(), t);
        }
    }
}
