use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Lcg64;

use super::graph::Gradients;
use super::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    Zeros,
    Constant(f64),
}

#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub init: Init,
}

/// Named learnable tensors of one model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut Lcg64,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let mut value = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Constant(c) => value.fill(F::of(c)),
            Init::Glorot => {
                let fan_in = shape.first().copied().unwrap_or(1);
                let fan_out = shape.get(1).copied().unwrap_or(1);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for x in value.data_mut() {
                    *x = F::of(rng.uniform(-bound, bound));
                }
            }
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            grad: Tensor::zeros(shape),
            name: name.clone(),
            value,
            init,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Adds parameter gradients from a backward pass into the `grad` slots.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (id, g) in grads.params() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn accumulate_scaled(&mut self, grads: &Gradients<F>, scale: F) {
        for (id, g) in grads.params() {
            let slot = &mut self.params[id.0].grad;
            for (a, &b) in slot.data_mut().iter_mut().zip(g.data()) {
                *a += b * scale;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = F::of(max_norm / norm);
            for p in &mut self.params {
                p.grad.scale_assign(s);
            }
        }
        norm
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Same parameters with elements converted to another precision.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    init: p.init,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut rng = Lcg64::new(0);
        let mut store = ParamStore::<f32>::new();
        store.add("w", &[2, 2], Init::Glorot, &mut rng).unwrap();
        assert!(store.add("w", &[2, 2], Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = Lcg64::new(1);
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", &[10, 14], Init::Glorot, &mut rng).unwrap();
        let bound = 0.5;
        assert!(store.get(id).value.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut rng = Lcg64::new(1);
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", &[1, 2], Init::Zeros, &mut rng).unwrap();
        store.get_mut(a).grad = Tensor::row(vec![30.0, 40.0]);
        let before = store.clip_grad_norm(5.0);
        assert_eq!(before, 50.0);
        assert!((store.grad_norm() - 5.0).abs() < 1e-12);
    }
}
