//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradRecord, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments per parameter plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| {
            let mut out = ParamSet::new();
            for (name, t) in p.iter() {
                out.insert(name.clone(), Tensor::zeros(t.shape()));
            }
            out
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }
}

/// One AdamW update of every parameter in `params`.
///
/// `grads` must name exactly the parameters in `params`; any non-finite
/// gradient aborts before anything is modified.
pub fn adamw_step(params: &mut ParamSet, grads: &GradRecord, state: &mut OptimState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if !grads.names().eq(params.names()) {
        let missing: Vec<&String> = params.names().filter(|n| grads.get(n).is_none()).collect();
        let extra: Vec<&String> = grads.names().filter(|n| !params.contains(n)).collect();
        return Err(Error::GradientCoverage(format!("missing {missing:?}, unexpected {extra:?}")));
    }
    for (name, g) in grads.iter() {
        if g.shape() != params.get(name).expect("checked").shape() {
            return Err(Error::shape("adamw_step", &[g.shape(), params.get(name).expect("checked").shape()]));
        }
        if !g.is_finite() {
            return Err(Error::NanGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, theta) in params.iter_mut() {
        let g = grads.get(name).expect("checked").data();
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::GradientCoverage(format!("no optimizer moment for `{name}`")))?
            .data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::GradientCoverage(format!("no optimizer moment for `{name}`")))?
            .data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let m = state.m.get(name).expect("present").data();
        let v = state.v.get(name).expect("present").data();
        for ((w, mi), vi) in theta.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *w = *w - lr * (m_hat / (v_hat.sqrt() + cfg.eps)) - lr * cfg.weight_decay * *w;
        }
    }
    Ok(())
}
