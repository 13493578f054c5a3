//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{GradError, Result};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the populated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if !store.grads_ready() {
            return Err(GradError::MissingGradients);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for (name, value, grad) in store.slots_mut() {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); value.len()], vec![T::zero(); value.len()]));
            if m.len() != value.len() {
                return Err(GradError::shape(
                    "adam",
                    format!("{name}: accumulator size changed"),
                ));
            }
            for (((p, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
