use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    let cfg = state.config;
    if cfg.lr <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "learning rate must be positive, got {}",
            cfg.lr
        )));
    }
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| {
            Error::InvalidInput(format!("gradient for unknown parameter `{name}`"))
        })?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "`{name}`: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                ),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
