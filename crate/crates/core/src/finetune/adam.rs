use indexmap::IndexMap;

use super::strategy::FreezePlan;
use crate::error::{Error, Result};
use crate::mininet::Model;
use crate::tensor::Tensor;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPSILON: f32 = 1e-8;

/// First and second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: IndexMap<String, Tensor> = model
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update of every trainable parameter at its plan
/// learning rate. Non-finite gradients abort the step before anything moves.
pub fn adam_step(
    model: &mut Model,
    grads: &IndexMap<String, Tensor>,
    plan: &FreezePlan,
    state: &mut AdamState,
) -> Result<()> {
    if grads.len() != model.params().len() || !grads.keys().all(|k| model.params().contains_key(k)) {
        return Err(Error::Contract("gradient keys do not match parameter keys".into()));
    }
    for (name, g) in grads {
        if g.shape() != model.params()[name].shape() {
            return Err(Error::dim("adam_step", "grad", format!("{:?}", model.params()[name].shape()), format!("{:?}", g.shape())));
        }
        if plan.is_trainable(name) && !g.all_finite() {
            return Err(Error::Numeric {
                context: name.clone(),
                reason: "non-finite gradient".into(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, g) in grads {
        if !plan.is_trainable(name) {
            continue;
        }
        let lr = plan.lr[name];
        let m = state.m.get_mut(name).expect("moments cover params");
        let v = state.v.get_mut(name).expect("moments cover params");
        let p = model.param_mut(name).expect("checked above");
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
