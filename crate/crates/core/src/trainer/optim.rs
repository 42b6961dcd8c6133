use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Adam moments plus the plateau / early-stopping bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
    pub t: u64,
    pub lr: f64,
    pub best_val_loss: f64,
    /// Epochs since the last improvement, reset whenever the rate is cut.
    pub plateau_counter: u32,
    /// Epochs since the last improvement, never reset by a rate cut.
    pub stale_epochs: u32,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a String, &'a Tensor<T>)>, config: &TrainConfig) -> Self {
        let m: IndexMap<_, _> = params.into_iter().map(|(k, p)| (k.clone(), Tensor::zeros(p.shape()))).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
            lr: config.alpha,
            best_val_loss: f64::INFINITY,
            plateau_counter: 0,
            stale_epochs: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter at the state's current
/// learning rate.
pub fn adam_step<T: Scalar>(
    params: &mut IndexMap<String, Tensor<T>>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        match grads.get(name) {
            None => return Err(Error::Usage(format!("no gradient for parameter `{name}`"))),
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::dim("adam_step", format!("gradient for `{name}` has shape {:?}", g.shape())))
            }
            Some(_) => {}
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1: T = cast(config.beta1);
    let b2: T = cast(config.beta2);
    let one = T::one();
    let c1: T = cast(1.0 - config.beta1.powi(t));
    let c2: T = cast(1.0 - config.beta2.powi(t));
    let lr: T = cast(state.lr);
    let eps: T = cast(config.epsilon);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape())).data_mut();
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape())).data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// What [`plateau_update`] did at an epoch end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlateauEvent {
    pub improved: bool,
    pub lr_reduced: bool,
}

/// End-of-epoch schedule update: record an improvement or count a stale
/// epoch, dividing the rate by `plateau_factor` after `plateau_patience`
/// stale epochs in a row.
pub fn plateau_update<T>(state: &mut OptimizerState<T>, val_loss: f64, config: &TrainConfig) -> PlateauEvent {
    let improved = val_loss < state.best_val_loss - config.improvement_threshold;
    let mut lr_reduced = false;
    if improved {
        state.best_val_loss = val_loss;
        state.plateau_counter = 0;
        state.stale_epochs = 0;
    } else {
        state.plateau_counter += 1;
        state.stale_epochs += 1;
        if state.plateau_counter >= config.plateau_patience {
            state.lr /= config.plateau_factor;
            state.plateau_counter = 0;
            lr_reduced = true;
        }
    }
    PlateauEvent { improved, lr_reduced }
}

pub fn early_stop_check<T>(state: &OptimizerState<T>, config: &TrainConfig) -> bool {
    state.stale_epochs >= config.early_stop_patience
}
