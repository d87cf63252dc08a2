use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradStore, ParamRole, ParamStore};
use crate::seed::{rng_for, Role};
use crate::tensor::{Real, Tensor};

/// `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Uniform Xavier weights; biases and betas zero, gammas one, running
/// statistics reset. Tensor `i` draws from its own stream so the result does
/// not depend on iteration order.
pub fn xavier_init<T: Real>(store: &mut ParamStore<T>, seed: u64) {
    for (i, p) in store.iter_mut().enumerate() {
        match p.role {
            ParamRole::Weight { fan_in, fan_out } => {
                let a = xavier_bound(fan_in, fan_out);
                let mut rng = rng_for(seed, Role::Init, i as u64);
                for v in p.value.data_mut() {
                    // open interval (-a, a)
                    let mut u = 0.0;
                    while u == 0.0 {
                        u = rng.random::<f64>();
                    }
                    *v = T::from_f64_lossy((2.0 * u - 1.0) * a);
                }
            }
            ParamRole::Gamma | ParamRole::RunningVar => p.value.data_mut().fill(T::one()),
            ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => p.value.data_mut().fill(T::zero()),
        }
    }
}

/// Learning rate for batch size `eta` given `lr0` tuned at `eta0`.
pub fn scale_lr(lr0: f64, eta0: usize, eta: usize) -> Result<f64> {
    if lr0.is_nan() || lr0 <= 0.0 || eta0 == 0 || eta == 0 {
        return Err(Error::config("learning-rate scaling needs positive arguments"));
    }
    Ok(lr0 * eta0 as f64 / eta as f64)
}

/// Mean-square accumulators aligned with a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub lr: f64,
    pub accum: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        OptimizerState {
            lr,
            accum: params.iter().map(|p| p.value.zeros_like()).collect(),
        }
    }
}

/// `s ← rho·s + (1−rho)·g²`, `θ ← θ − lr·g / (sqrt(s) + epsilon)` for every
/// trainable tensor. Nothing changes if any gradient is non-finite.
pub fn rmsprop_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &GradStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    rho: f64,
    epsilon: f64,
) -> Result<()> {
    if grads.grads.len() != params.len() || state.accum.len() != params.len() {
        return Err(Error::mismatch("optimizer state, gradients and parameters differ in length"));
    }
    for (i, (p, g)) in params.iter().zip(&grads.grads).enumerate() {
        if p.value.shape() != g.shape() || p.value.shape() != state.accum[i].shape() {
            return Err(Error::mismatch(format!("gradient shape differs for {}", p.name)));
        }
        if p.role.trainable() && !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
        }
    }
    let (rho_t, keep, lr_t, eps) = (
        T::from_f64_lossy(rho),
        T::from_f64_lossy(1.0 - rho),
        T::from_f64_lossy(lr),
        T::from_f64_lossy(epsilon),
    );
    for (i, p) in params.iter_mut().enumerate() {
        if !p.role.trainable() {
            continue;
        }
        let s = state.accum[i].data_mut();
        for ((theta, s), &g) in p.value.data_mut().iter_mut().zip(s).zip(grads.grads[i].data()) {
            *s = rho_t * *s + keep * g * g;
            *theta = *theta - lr_t * g / (s.sqrt() + eps);
        }
    }
    state.lr = lr;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub lr_min: f64,
}

/// Reduce-on-plateau bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        PlateauState {
            lr,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Record one epoch's monitored loss; returns the learning rate for the next epoch.
    pub fn step(&mut self, config: &PlateauConfig, loss: f64) -> Result<f64> {
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("monitored loss is {loss}")));
        }
        match self.best {
            Some(best) if loss > best - config.min_delta => {
                self.bad_epochs += 1;
                if self.bad_epochs >= config.patience {
                    self.lr = (self.lr * config.factor).max(config.lr_min);
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        Ok(self.lr)
    }
}
