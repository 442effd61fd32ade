use std::f64::consts::PI;

use super::params::ParamStore;
use super::{MvaError, TrainConfig};
use crate::numerics::{Real, Tensor};

/// Linear warmup from 0 to the peak rate, then half-cosine down to 0 at
/// `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64, MvaError> {
    let total = cfg.total_steps;
    if step > total {
        return Err(MvaError::Step { step, total });
    }
    let peak = cfg.peak_lr();
    let warm = cfg.warmup_steps;
    if step < warm || (step == warm && warm == total) {
        return Ok(peak * step as f64 / warm as f64);
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
}

/// AdamW with bias correction and decoupled weight decay on matrices.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    decay: Vec<bool>,
    step: usize,
}

impl<T: Real> AdamW<T> {
    /// Weight decay applies to weight matrices (`*.w`) only.
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect(),
            v: params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect(),
            decay: params.names().iter().map(|n| n.ends_with(".w")).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn decays(&self, index: usize) -> bool {
        self.decay[index]
    }

    /// One update with learning rate `lr`. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64, cfg: &TrainConfig) -> Result<(), MvaError> {
        if grads.len() != params.len() {
            return Err(MvaError::Slots(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (name, g) in params.names().iter().zip(grads) {
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(MvaError::NonFiniteGrad { name: name.clone(), index, value: g.data()[index].to_f64_lossy() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = |x: f64| T::from_f64_lossy(x);
        let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
        let (one_b1, one_b2) = (c(1.0 - cfg.beta1), c(1.0 - cfg.beta2));
        let bc1 = c(1.0 - cfg.beta1.powi(t));
        let bc2 = c(1.0 - cfg.beta2.powi(t));
        let (lr_t, eps) = (c(lr), c(cfg.eps));
        let shrink = c(1.0 - lr * cfg.weight_decay);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = self.decay[i];
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                if decay {
                    *w *= shrink;
                }
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        for (name, p) in params.iter() {
            if !p.all_finite() {
                return Err(MvaError::NonFiniteParam { name: name.into(), step: self.step });
            }
        }
        Ok(())
    }
}
