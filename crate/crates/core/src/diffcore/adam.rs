use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters instead of adding an
    /// L2 term to the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decoupled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .tensors()
                .iter()
                .map(|p| Array2::zeros(p.value.raw_dim()))
                .collect()
        };
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One Adam update using the gradients currently held in `store`.
///
/// With coupled weight decay the gradient becomes `g + wd·θ` before the
/// moment updates. The gradients are marked stale afterwards; a second call
/// without a fresh backward pass is an error.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if !store.grads_fresh {
        return Err(Error::InvalidArgument(
            "adam_step called without fresh gradients".into(),
        ));
    }
    if state.m.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state tracks {} tensors, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    if let Some(bad) = store
        .tensors()
        .iter()
        .find(|p| p.grad.iter().any(|g| !g.is_finite()))
    {
        return Err(Error::Numerical(format!(
            "non-finite gradient in {}",
            bad.name
        )));
    }

    let c = state.config;
    state.t += 1;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for (i, p) in store.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        Zip::from(&mut p.value)
            .and(&p.grad)
            .and(m)
            .and(v)
            .for_each(|theta, &g, m, v| {
                let g = if c.decoupled {
                    g
                } else {
                    g + c.weight_decay * *theta
                };
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                if c.decoupled {
                    *theta -= c.lr * c.weight_decay * *theta;
                }
                *theta -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            });
    }
    store.grads_fresh = false;
    Ok(())
}
