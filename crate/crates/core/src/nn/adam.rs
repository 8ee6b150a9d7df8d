//! Adam with per-group learning rates.

use super::params::{ParamGroup, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{contract_err, Result};

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_hyper(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |_| -> Vec<Tensor<T>> {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        AdamState {
            step: 0,
            beta1,
            beta2,
            eps,
            m: zeros(()),
            v: zeros(()),
        }
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<T> {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor<T> {
        &self.v[i]
    }

    /// One update of every parameter in `store`. `grads` is indexed like the
    /// store; `lr` maps each parameter's group to its current rate.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(contract_err!(
                "adam: {} grads / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            ));
        }
        if let Some((_, p)) = store.iter().find(|(id, _)| grads[id.0].is_none()) {
            return Err(contract_err!("adam: missing gradient for {}", p.name));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let eps = T::c(self.eps);
        for (i, param) in store.iter_mut().enumerate() {
            let g = grads[i].as_ref().expect("checked above");
            if g.shape() != param.value.shape() {
                return Err(contract_err!("adam: gradient shape mismatch for {}", param.name));
            }
            let step_size = T::c(lr(param.group) / bc1);
            let inv_bc2 = T::c(1.0 / bc2);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, g), m), v) in param.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * *g;
                *v = b2 * *v + (T::one() - b2) * *g * *g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
