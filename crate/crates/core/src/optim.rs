//! Cosine annealing with warm restarts and SGD with Nesterov momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{Module, Visitor};
use crate::tensor::Real;

/// Learning-rate schedule: cosine decay from `lr0` to `eta_min` within each
/// period, restarting at every epoch in `restarts`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr0: f64,
    pub eta_min: f64,
    pub epochs: usize,
    pub restarts: Vec<usize>,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let mut prev = 0;
        for &r in &self.restarts {
            if r <= prev || r >= self.epochs {
                return Err(Error::config(format!(
                    "restart epochs must be strictly increasing, positive and below {} (got {:?})",
                    self.epochs, self.restarts
                )));
            }
            prev = r;
        }
        Ok(())
    }

    /// `(start, length)` of the period containing `epoch`.
    pub fn period(&self, epoch: usize) -> (usize, usize) {
        let mut start = 0;
        let mut end = self.epochs;
        for &r in &self.restarts {
            if r <= epoch {
                start = r;
            } else {
                end = r;
                break;
            }
        }
        (start, end - start)
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::config(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.epochs
            )));
        }
        let (s, t) = self.period(epoch);
        let phase = std::f64::consts::PI * (epoch - s) as f64 / t as f64;
        Ok(self.eta_min + 0.5 * (self.lr0 - self.eta_min) * (1.0 + phase.cos()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub dampening: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            dampening: 0.0,
            weight_decay: 5e-4,
            nesterov: true,
        }
    }
}

/// Velocity buffers, one per parameter tensor in visit order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Vec<T>>,
    pub steps: u64,
}

/// One update of a single tensor:
///
/// ```text
/// g = grad + wd·p          (wd only where `decay`)
/// v = m·v + (1 − dampening)·g
/// p = p − lr·(g + m·v)     (Nesterov; plain momentum uses p − lr·v)
/// ```
pub fn sgd_update<T: Real>(cfg: &SgdConfig, lr: f64, decay: bool, p: &mut [T], grad: &[T], v: &mut [T]) -> Result<()> {
    if p.len() != grad.len() || p.len() != v.len() {
        return Err(Error::shape(format!(
            "sgd step over {} values with {} grads and {} velocities",
            p.len(),
            grad.len(),
            v.len()
        )));
    }
    let m = T::of(cfg.momentum);
    let damp = T::of(1.0 - cfg.dampening);
    let wd = T::of(if decay { cfg.weight_decay } else { 0.0 });
    let lr = T::of(lr);
    for ((p, &g), v) in p.iter_mut().zip(grad).zip(v.iter_mut()) {
        let g = g + wd * *p;
        *v = m * *v + damp * g;
        let step = if cfg.nesterov { g + m * *v } else { *v };
        *p = *p - lr * step;
    }
    Ok(())
}

struct Step<'a, T> {
    cfg: &'a SgdConfig,
    lr: f64,
    state: &'a mut SgdState<T>,
    slot: usize,
    err: Option<Error>,
}

impl<T: Real> Visitor<T> for Step<'_, T> {
    fn param(&mut self, _: &str, _: &[usize], value: &mut [T], grad: &mut [T], decay: bool) {
        if self.slot == self.state.velocity.len() {
            self.state.velocity.push(vec![T::zero(); value.len()]);
        }
        let v = &mut self.state.velocity[self.slot];
        if let Err(e) = sgd_update(self.cfg, self.lr, decay, value, grad, v) {
            self.err.get_or_insert(e);
        }
        self.slot += 1;
    }
}

/// Applies one step to every parameter of `model`, creating velocity buffers on first use.
pub fn sgd_step<T: Real, M: Module<T> + ?Sized>(
    model: &mut M,
    state: &mut SgdState<T>,
    lr: f64,
    cfg: &SgdConfig,
) -> Result<()> {
    let mut s = Step {
        cfg,
        lr,
        state,
        slot: 0,
        err: None,
    };
    model.visit("", &mut s);
    if let Some(e) = s.err {
        return Err(e);
    }
    state.steps += 1;
    Ok(())
}
