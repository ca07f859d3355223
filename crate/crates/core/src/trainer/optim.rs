use serde::{Deserialize, Serialize};

use super::mask::Region;
use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::{c, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 1e-4,
            batch_size: 2,
            epochs: 5,
            validation_fraction: 0.1,
            seed: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "betas must lie in [0, 1), eps > 0, weight decay ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

/// One decoupled-weight-decay Adam update of a flat slice. `step` is the
/// 1-based step count used for bias correction.
pub fn adamw_step<T: Scalar>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], step: u64, cfg: &TrainConfig) {
    debug_assert!(step >= 1);
    let (b1, b2) = cfg.betas;
    let lr = c::<T>(cfg.learning_rate);
    let decay = T::one() - lr * c::<T>(cfg.weight_decay);
    let bc1 = c::<T>(1.0 - b1.powi(step as i32));
    let bc2 = c::<T>(1.0 - b2.powi(step as i32));
    let (b1, b2, eps) = (c::<T>(b1), c::<T>(b2), c::<T>(cfg.eps));
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        params[i] = params[i] * decay - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// First and second moments for every trainable region.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(regions: &[Region]) -> Self {
        let zeros = || regions.iter().map(|r| vec![T::zero(); r.len()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Updates only the elements inside `regions`; rejects non-finite
    /// gradients before touching anything.
    pub fn apply(
        &mut self,
        params: &mut Params<T>,
        grads: &Params<T>,
        regions: &[Region],
        cfg: &TrainConfig,
    ) -> Result<()> {
        let grad_tensors = grads.tensors();
        for r in regions {
            let g = &grad_tensors[r.tensor].data()[r.start..r.end];
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGrad(r.name.clone()));
            }
        }
        self.step += 1;
        let mut tensors = params.tensors_mut();
        for (i, r) in regions.iter().enumerate() {
            let p = &mut tensors[r.tensor].data_mut()[r.start..r.end];
            let g = &grad_tensors[r.tensor].data()[r.start..r.end];
            adamw_step(p, g, &mut self.m[i], &mut self.v[i], self.step, cfg);
        }
        Ok(())
    }
}
