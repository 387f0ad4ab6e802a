use serde::{Deserialize, Serialize};

use crate::graph::Grads;
use crate::layers::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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

/// Moment buffers, serializable for checkpoint resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let m: Vec<_> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let v = m.clone();
        Self { config, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let c = &self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::lit(c.lr * bc2.sqrt() / bc1);
        let eps = T::lit(c.eps * bc2.sqrt());
        for (id, g) in &grads.by_param {
            let m = self.m[*id].data_mut();
            let v = self.v[*id].data_mut();
            let p = store.get_mut(*id).value.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
    }

    pub fn state(&self) -> AdamState {
        let conv = |ts: &[Tensor<T>]| ts.iter().map(|t| t.data().iter().map(|x| x.to_f32().unwrap_or(0.0)).collect()).collect();
        AdamState { step: self.step, m: conv(&self.m), v: conv(&self.v) }
    }

    pub fn load_state(&mut self, state: &AdamState) -> Result<(), String> {
        if state.m.len() != self.m.len() || state.v.len() != self.v.len() {
            return Err("optimizer state does not match parameter count".into());
        }
        for (dst, src) in self.m.iter_mut().zip(&state.m).chain(self.v.iter_mut().zip(&state.v)) {
            if dst.len() != src.len() {
                return Err("optimizer state tensor size mismatch".into());
            }
            for (d, &s) in dst.data_mut().iter_mut().zip(src) {
                *d = T::from_f32(s).unwrap_or_else(T::zero);
            }
        }
        self.step = state.step;
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let total: f64 = grads
        .by_param
        .values()
        .flat_map(|t| t.data().iter())
        .map(|x| {
            let x = x.to_f64().unwrap_or(0.0);
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = T::lit(max_norm / total);
        for t in grads.by_param.values_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
    total
}
