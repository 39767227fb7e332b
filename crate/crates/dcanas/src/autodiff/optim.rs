//! SGD with momentum, Adam, cosine learning-rate decay and gradient clipping.
//!
//! Weight decay is the classic L2-in-gradient form: `g ← g + wd·w` before the
//! update rule. Gradients are zeroed after a successful step.

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

pub struct SgdMomentum<E: Scalar> {
    params: Vec<(String, Tensor<E>)>,
    velocity: Vec<Vec<E>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    steps: u64,
    allow_missing: bool,
}

impl<E: Scalar> SgdMomentum<E> {
    pub fn new(params: Vec<(String, Tensor<E>)>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect();
        SgdMomentum {
            params,
            velocity,
            lr,
            momentum,
            weight_decay,
            steps: 0,
            allow_missing: false,
        }
    }

    /// Skip parameters without gradients instead of erroring. Supernets need
    /// this: derived cells only run their currently selected ops, so the
    /// unselected candidate weights see no gradient that step.
    pub fn allow_missing_grads(mut self) -> Self {
        self.allow_missing = true;
        self
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn params(&self) -> &[(String, Tensor<E>)] {
        &self.params
    }

    pub fn step(&mut self) -> Result<()> {
        let lr = E::from_f64(self.lr);
        let mom = E::from_f64(self.momentum);
        let wd = E::from_f64(self.weight_decay);
        for ((name, p), v) in self.params.iter().zip(self.velocity.iter_mut()) {
            let grad = match p.grad() {
                Some(g) => g,
                None if self.allow_missing => continue,
                None => return Err(Error::MissingGrad { name: name.clone() }),
            };
            let mut data = p.data_mut();
            for ((w, vi), g) in data.iter_mut().zip(v.iter_mut()).zip(&grad) {
                let g = *g + wd * *w;
                *vi = mom * *vi + g;
                *w -= lr * *vi;
            }
        }
        for (_, p) in &self.params {
            p.zero_grad();
        }
        self.steps += 1;
        Ok(())
    }
}

pub struct Adam<E: Scalar> {
    params: Vec<(String, Tensor<E>)>,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    steps: u64,
    allow_missing: bool,
}

impl<E: Scalar> Adam<E> {
    pub fn new(
        params: Vec<(String, Tensor<E>)>,
        lr: f64,
        betas: (f64, f64),
        weight_decay: f64,
    ) -> Self {
        let m = params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect();
        Adam {
            params,
            m,
            v,
            lr,
            betas,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            allow_missing: false,
        }
    }

    pub fn allow_missing_grads(mut self) -> Self {
        self.allow_missing = true;
        self
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn params(&self) -> &[(String, Tensor<E>)] {
        &self.params
    }

    pub fn step(&mut self) -> Result<()> {
        self.steps += 1;
        let t = self.steps as f64;
        let (b1, b2) = self.betas;
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let step_size = E::from_f64(self.lr / bias1);
        let b1e = E::from_f64(b1);
        let b2e = E::from_f64(b2);
        let one_m_b1 = E::from_f64(1.0 - b1);
        let one_m_b2 = E::from_f64(1.0 - b2);
        let inv_sqrt_bias2 = E::from_f64(1.0 / bias2.sqrt());
        let eps = E::from_f64(self.eps);
        let wd = E::from_f64(self.weight_decay);
        for (((name, p), m), v) in self
            .params
            .iter()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let grad = match p.grad() {
                Some(g) => g,
                None if self.allow_missing => continue,
                None => return Err(Error::MissingGrad { name: name.clone() }),
            };
            let mut data = p.data_mut();
            for (((w, mi), vi), g) in data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&grad) {
                let g = *g + wd * *w;
                *mi = b1e * *mi + one_m_b1 * g;
                *vi = b2e * *vi + one_m_b2 * g * g;
                let denom = (*vi).sqrt() * inv_sqrt_bias2 + eps;
                *w -= step_size * *mi / denom;
            }
        }
        for (_, p) in &self.params {
            p.zero_grad();
        }
        Ok(())
    }
}

/// Cosine decay from `initial_lr` to `floor_lr` over `total_steps`.
#[derive(Debug, Clone)]
pub struct CosineSchedule {
    pub initial_lr: f64,
    pub total_steps: usize,
    pub floor_lr: f64,
}

impl CosineSchedule {
    pub fn new(initial_lr: f64, total_steps: usize) -> Self {
        CosineSchedule {
            initial_lr,
            total_steps,
            floor_lr: 0.0,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.initial_lr;
        }
        let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.floor_lr
            + 0.5 * (self.initial_lr - self.floor_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<E: Scalar>(params: &[(String, Tensor<E>)], max_norm: f64) -> f64 {
    let mut total = 0.0f64;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            total += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = E::from_f64(max_norm / norm);
        for (_, p) in params {
            if let Some(mut g) = p.grad() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
                p.zero_grad();
                p.accumulate_grad(&g);
            }
        }
    }
    norm
}
