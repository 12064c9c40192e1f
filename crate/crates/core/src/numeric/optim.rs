use std::f64::consts::PI;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam with decoupled weight decay. With `weight_decay = 0` this is Adam.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|t| vec![S::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let bc1 = S::lit(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = S::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr_s, eps) = (S::lit(lr), S::lit(self.eps));
        let decay = S::lit(1.0 - lr * self.weight_decay);
        let ids: Vec<_> = (0..params.len()).collect();
        for i in ids {
            let old = &params.tensors()[i];
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut next = Vec::with_capacity(old.len());
            for (j, &w) in old.data().iter().enumerate() {
                m[j] = b1 * m[j] + (S::one() - b1) * g[j];
                v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                next.push(w * decay - lr_s * mhat / (vhat.sqrt() + eps));
            }
            let shape = old.shape().to_vec();
            params.set(super::ParamId::from_index(i), Tensor::new(shape, next)?)?;
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` to `min_lr` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.base_lr;
        }
        let frac = (step.min(self.total_steps - 1)) as f64 / (self.total_steps - 1) as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * frac).cos())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = S::lit(max_norm / total);
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    total
}
