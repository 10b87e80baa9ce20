//! Adaptive-moment optimizer.

use crate::error::{Error, Result};
use crate::model::HaanParams;
use crate::scalar::Scalar;
use crate::tape::GradientSet;
use crate::tensor::Tensor;

/// Per-parameter first/second moment accumulators and the step count.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &HaanParams<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected update of every parameter in place.
pub fn adam_step<S: Scalar>(
    params: &mut HaanParams<S>,
    grads: &GradientSet<S>,
    state: &mut AdamState<S>,
    learning_rate: f64,
) -> Result<()> {
    state.step += 1;
    let b1 = S::of(state.beta1);
    let b2 = S::of(state.beta2);
    let eps = S::of(state.epsilon);
    let lr = S::of(learning_rate);
    let corr1 = S::of(1.0 - state.beta1.powi(state.step as i32));
    let corr2 = S::of(1.0 - state.beta2.powi(state.step as i32));

    for id in 0..params.params().len() {
        let name = params.params()[id].name;
        let grad = match grads.get(id) {
            Some(g) => g,
            None => continue,
        };
        if !grad.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter '{}'",
                name
            )));
        }
        if grad.shape() != params.value(id).shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "gradient {:?} vs parameter '{}' {:?}",
                    grad.shape(),
                    name,
                    params.value(id).shape()
                ),
            ));
        }
        let gv = grad.values();
        let m = state.m[id].values_mut();
        let v = state.v[id].values_mut();
        let pv = params.value_mut(id).values_mut();
        for i in 0..gv.len() {
            m[i] = b1 * m[i] + (S::one() - b1) * gv[i];
            v[i] = b2 * v[i] + (S::one() - b2) * gv[i] * gv[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            pv[i] = pv[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    if !params.all_finite() {
        return Err(Error::Numeric("parameters left finite range".into()));
    }
    Ok(())
}
