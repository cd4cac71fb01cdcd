use std::collections::BTreeMap;

use super::{Matrix, ParameterSet};
use crate::error::{Error, Result};

/// AdamW hyperparameters plus per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, keyed by parameter name. Only non-frozen
    /// parameters ever get an entry.
    pub moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl OptimizerState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One AdamW update (decoupled weight decay) over every non-frozen
/// parameter, then zeroes all gradients.
pub fn adamw_step<P: ParameterSet + ?Sized>(params: &mut P, state: &mut OptimizerState) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (lr, wd, b1, b2, eps) = (
        state.lr,
        state.weight_decay,
        state.beta1,
        state.beta2,
        state.eps,
    );
    let mut failure = None;
    params.visit_mut(&mut |p| {
        if p.frozen {
            p.zero_grad();
            return;
        }
        if p.grad.shape() != p.value.shape() {
            failure.get_or_insert_with(|| {
                Error::Internal(format!("missing or misshapen gradient for {}", p.name))
            });
            return;
        }
        let (m, v) = state.moments.entry(p.name.clone()).or_insert_with(|| {
            (
                Matrix::zeros(p.value.rows(), p.value.cols()),
                Matrix::zeros(p.value.rows(), p.value.cols()),
            )
        });
        let values = p.value.data_mut();
        let grads = p.grad.data();
        for i in 0..values.len() {
            let g = grads[i];
            let mi = &mut m.data_mut()[i];
            *mi = b1 * *mi + (1.0 - b1) * g;
            let mhat = *mi / bc1;
            let vi = &mut v.data_mut()[i];
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let vhat = *vi / bc2;
            values[i] *= 1.0 - lr * wd;
            values[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        p.zero_grad();
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
