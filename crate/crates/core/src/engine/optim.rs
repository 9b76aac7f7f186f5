use std::collections::{BTreeMap, HashMap};

use super::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState<T> {
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new() -> Self {
        Self { velocity: BTreeMap::new() }
    }
}

/// Learning rate at `step` of `total_steps`.
pub fn learning_rate(cfg: &OptimConfig, step: usize, total_steps: usize) -> f64 {
    match cfg.poly_power {
        Some(p) if total_steps > 0 => cfg.lr * (1.0 - step as f64 / total_steps as f64).max(0.0).powf(p),
        _ => cfg.lr,
    }
}

/// SGD with momentum and coupled weight decay:
/// `v <- momentum * v + g + wd * p`, `p <- p - lr * v`.
///
/// Parameters without a gradient are left untouched, momentum included.
pub fn sgd_update<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &HashMap<String, Tensor<T>>,
    state: &mut SgdState<T>,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Diverged { step: 0, detail: format!("non-finite gradient for {name}") });
        }
    }
    let (mu, wd, lr) = (T::of(cfg.momentum), T::of(cfg.weight_decay), T::of(lr));
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        p.expect_same_shape(g)?;
        let v = state.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}
