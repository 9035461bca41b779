use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Named trainable tensors with gradient accumulators and Adam state.
///
/// Iteration order is the lexicographic order of names, which fixes the
/// accumulation and update order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
    steps: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let n = value.len();
        self.slots.insert(
            name,
            Slot {
                value,
                grad: vec![0.0; n],
                first_moment: vec![0.0; n],
                second_moment: vec![0.0; n],
            },
        );
        Ok(())
    }

    /// Xavier-uniform initialised `fan_in x fan_out` matrix.
    pub fn insert_xavier<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set",
                left: slot.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        self.slots
            .get(name)
            .map(|s| s.grad.as_slice())
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if slot.grad.len() != grad.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                left: vec![slot.grad.len()],
                right: vec![grad.len()],
            });
        }
        for (g, d) in slot.grad.iter_mut().zip(grad) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grad(&mut self, factor: f64) {
        for slot in self.slots.values_mut() {
            slot.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// One Adam step with the fixed default moments; gradients are zeroed afterwards.
    pub fn optimizer_step(&mut self, learning_rate: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for slot in self.slots.values_mut() {
            let Slot {
                value,
                grad,
                first_moment,
                second_moment,
            } = slot;
            for (((w, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.iter_mut())
                .zip(first_moment.iter_mut())
                .zip(second_moment.iter_mut())
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * *g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * *g * *g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                *g = 0.0;
            }
            if value.data().iter().any(|w| !w.is_finite()) {
                return Err(Error::NonFinite("optimizer_step"));
            }
        }
        Ok(())
    }

    /// Copy of the parameter values only, with fresh optimizer state.
    pub fn snapshot(&self) -> Self {
        let mut out = Self::new();
        for (name, value) in self.iter() {
            out.insert(name, value.clone()).expect("names are unique");
        }
        out
    }

    /// Flat copy of every parameter, in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.slots
            .values()
            .flat_map(|s| s.value.data().iter().copied())
            .collect()
    }

    pub fn flatten_grad(&self) -> Vec<f64> {
        self.slots.values().flat_map(|s| s.grad.iter().copied()).collect()
    }

    /// Overwrite every parameter from a flat vector in name order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape {
                op: "assign_flat",
                left: vec![self.num_scalars()],
                right: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for slot in self.slots.values_mut() {
            let n = slot.value.len();
            slot.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
