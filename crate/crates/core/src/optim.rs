//! Momentum SGD with coupled weight decay, and the learning-rate schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
pub struct Sgd<S> {
    cfg: SgdConfig,
    velocity: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(cfg: SgdConfig, entries: usize) -> Self {
        Self {
            cfg,
            velocity: (0..entries).map(|_| None).collect(),
        }
    }

    pub fn config(&self) -> SgdConfig {
        self.cfg
    }

    /// Applies one update for each `(entry id, gradient)` pair.
    ///
    /// A negative or non-finite `lr` is rejected. Zero is allowed and leaves
    /// parameters untouched (velocities still accumulate).
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[(usize, Tensor<S>)], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(alloc::format!("learning rate must be >= 0, got {lr}")));
        }
        let (m, wd, lr) = (
            S::from_f64_lossy(self.cfg.momentum),
            S::from_f64_lossy(self.cfg.weight_decay),
            S::from_f64_lossy(lr),
        );
        for (id, g) in grads {
            let p = store.value_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::shape("sgd step", g.shape(), p.shape()));
            }
            let v = self.velocity[*id].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = m * *vi + (gi + wd * *pi);
                if lr != S::zero() {
                    *pi = *pi - lr * *vi;
                }
            }
        }
        Ok(())
    }

    /// Velocity buffer of entry `id`, if it has been updated.
    pub fn velocity(&self, id: usize) -> Option<&Tensor<S>> {
        self.velocity.get(id).and_then(Option::as_ref)
    }

    /// Restores a velocity buffer, e.g. when resuming.
    pub fn set_velocity(&mut self, id: usize, v: Tensor<S>) -> Result<()> {
        let slot = self.velocity.get_mut(id).ok_or(Error::Index {
            what: "optimizer entry",
            index: id,
            len: 0,
        })?;
        *slot = Some(v);
        Ok(())
    }
}

/// Linear warmup, then step decay at fixed epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Strictly increasing epoch indices where the rate is multiplied by
    /// `factor`.
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    /// Warmup of 5 epochs and decay by 0.1 at 60% and 80% of `epochs`.
    pub fn standard(base_lr: f64, epochs: usize) -> Self {
        let mut milestones = Vec::new();
        for frac in [6, 8] {
            let e = epochs * frac / 10;
            if e > 0 && milestones.last() != Some(&e) {
                milestones.push(e);
            }
        }
        Self {
            base_lr,
            warmup_epochs: 5.min(epochs.saturating_sub(1)),
            milestones,
            factor: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Zero is accepted: it freezes the weights, which is useful for
        // checking a pipeline end to end.
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be nonnegative"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("milestones must be strictly increasing"));
        }
        if !(self.factor > 0.0 && self.factor.is_finite()) {
            return Err(Error::config("decay factor must be positive"));
        }
        Ok(())
    }

    /// Rate for 0-based `epoch`. During warmup the rate ramps as
    /// `base * (epoch + 1) / (warmup + 1)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count();
        let mut lr = self.base_lr * num_traits::Float::powi(self.factor, decays as i32);
        if epoch < self.warmup_epochs {
            lr *= (epoch + 1) as f64 / (self.warmup_epochs + 1) as f64;
        }
        lr
    }
}
