//! Adam with bias correction and the reduce-on-plateau schedule.

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-7;
pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Completed steps.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every parameter. Non-finite gradients abort the step
    /// before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::pre(
                "adam_step",
                format!(
                    "{} gradients and {} moment slots for {} parameters",
                    grads.len(),
                    self.m.len(),
                    params.len()
                ),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            let p = params.get(i);
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.value.shape(),
                    right: g.shape(),
                });
            }
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at element {bad} ({}); step aborted",
                    p.name,
                    g.data()[bad]
                )));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        for (i, g) in grads.iter().enumerate() {
            let theta = params.value_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j].as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::lit(mj);
                v[j] = T::lit(vj);
                let upd = self.lr * (mj / c1) / ((vj / c2).sqrt() + self.epsilon);
                theta[j] = T::lit(theta[j].as_f64() - upd);
            }
        }
        Ok(())
    }
}

pub const PLATEAU_FACTOR: f64 = 0.1;
pub const PLATEAU_PATIENCE: usize = 10;
pub const PLATEAU_MIN_LR: f64 = 1e-7;
pub const PLATEAU_THRESHOLD: f64 = 1e-4;

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without improvement of the monitored loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauState {
    pub best: f64,
    pub num_bad: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Improvement needed: `loss < best - threshold`.
    pub threshold: f64,
}

impl Default for PlateauState {
    fn default() -> Self {
        Self {
            best: f64::INFINITY,
            num_bad: 0,
            patience: PLATEAU_PATIENCE,
            factor: PLATEAU_FACTOR,
            min_lr: PLATEAU_MIN_LR,
            threshold: PLATEAU_THRESHOLD,
        }
    }
}

impl PlateauState {
    /// Feeds one epoch's loss; returns the learning rate for the next epoch.
    pub fn update(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.num_bad = 0;
            return lr;
        }
        self.num_bad += 1;
        if self.num_bad >= self.patience {
            self.num_bad = 0;
            let reduced = (lr * self.factor).max(self.min_lr);
            if reduced < lr {
                log::info!("plateau: learning rate {lr:e} -> {reduced:e}");
            }
            return reduced;
        }
        lr
    }
}
