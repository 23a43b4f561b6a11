use serde::{Deserialize, Serialize};

use super::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Joint L2 norm of every gradient tensor.
pub fn global_norm<T: Real>(grads: &ParamSet<T>) -> f64 {
    grads.tensors().iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients jointly so their global norm is at most
/// `max_norm`. Returns the norm measured before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut ParamSet<T>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(format!("max_norm must be > 0, got {max_norm}")));
    }
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::from_f(max_norm / norm);
        for t in grads.tensors_mut() {
            for x in t.data_mut() {
                *x = *x * s;
            }
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            m: params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect(),
            v: params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay
/// (`p <- p - lr * wd * p` before the adaptive update).
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for i in 0..params.len() {
        let (p, g) = (params.get(i), grads.get(i));
        if params.name(i) != grads.name(i) || p.shape() != g.shape() || state.m[i].len() != p.numel() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "param {} {:?} vs grad {} {:?}",
                    params.name(i),
                    p.shape(),
                    grads.name(i),
                    g.shape()
                ),
            ));
        }
    }

    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let (b1, b2) = (T::from_f(cfg.beta1), T::from_f(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let lr = T::from_f(cfg.lr);
    let decay = T::from_f(1.0 - cfg.lr * cfg.weight_decay);
    let (bc1, bc2) = (T::from_f(bc1), T::from_f(bc2));
    let eps = T::from_f(cfg.eps);

    let mut updated: Vec<Vec<T>> = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let p = params.get(i).data();
        let g = grads.get(i).data();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut next = Vec::with_capacity(p.len());
        for j in 0..p.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let decayed = if cfg.weight_decay == 0.0 { p[j] } else { p[j] * decay };
            next.push(decayed - lr * m_hat / (v_hat.sqrt() + eps));
        }
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("Adam update of {}", params.name(i))));
        }
        updated.push(next);
    }
    for (i, next) in updated.into_iter().enumerate() {
        params.get_mut(i).data_mut().copy_from_slice(&next);
    }
    state.step = t;
    Ok(())
}
