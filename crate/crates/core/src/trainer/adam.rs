use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Autoencoder;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates applied so far (drives bias correction).
    pub step: u64,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut Moments<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::shape(
            "adam",
            &[param.len(), state.m.len()],
            &[grad.len(), state.v.len()],
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        let m = b1 * state.m[i].as_f64() + (1.0 - b1) * g;
        let v = b2 * state.v[i].as_f64() + (1.0 - b2) * g * g;
        state.m[i] = T::of(m);
        state.v[i] = T::of(v);
        let update = cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        param[i] = T::of(param[i].as_f64() - update);
    }
    Ok(())
}

/// Adam over the named parameters of an [`Autoencoder`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
        }
    }

    /// Applies `grads` (keyed by parameter name). Parameters in frozen groups
    /// and parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        model: &mut Autoencoder<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        let frozen: BTreeSet<_> = model.frozen_groups().clone();
        for (name, group, param) in model.parameters_mut() {
            if frozen.contains(&group) {
                continue;
            }
            let Some(g) = grads.get(&name) else { continue };
            if g.shape() != param.shape() {
                return Err(Error::shape("adam gradient", g.shape(), param.shape()));
            }
            let state = self
                .moments
                .entry(name)
                .or_insert_with(|| Moments::zeros(param.numel()));
            adam_step(param.data_mut(), g.data(), state, &self.config)?;
        }
        Ok(())
    }
}
