use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MbcError, Result};
use crate::num::params::ParamStore;
use crate::num::tensor::Tensor;

/// Per-parameter Adam accumulators.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState { m: vec![0.0; numel], v: vec![0.0; numel], step: 0 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam update with bias correction. The stability constant sits under
/// the square root: step = lr * m_hat / sqrt(v_hat + eps).
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
    name: &str,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(MbcError::Shape(format!(
            "adam_step {name}: param {:?} vs grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    if lr <= 0.0 {
        return Err(MbcError::InvalidArgument(format!("adam_step {name}: lr {lr} must be > 0")));
    }
    if !grad.all_finite() {
        return Err(MbcError::NonFinite(format!("gradient of {name}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((p, &g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat + hyper.eps).sqrt();
    }
    Ok(())
}

/// Adam over a parameter store; lazily creates state per named parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamOptimizer {
    pub hyper: AdamHyper,
    pub states: BTreeMap<String, AdamState>,
}

impl AdamOptimizer {
    pub fn new(hyper: AdamHyper) -> Self {
        AdamOptimizer { hyper, states: BTreeMap::new() }
    }

    /// Apply one step to every trainable parameter that received a gradient.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            let param = store.get_mut(name)?;
            if !param.trainable {
                continue;
            }
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(param.value.numel()));
            adam_step(&mut param.value, grad, state, lr, &self.hyper, name)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut p = Tensor::row_vec(vec![1.0, -2.0, 3.0]);
        let g = Tensor::zeros(1, 3);
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, 0.1, &AdamHyper::default(), "p").unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_hand_value() {
        // param 0, grad 1, lr 0.1: m_hat = v_hat = 1, so the update is
        // 0.1 / sqrt(1 + 1e-8) = 0.0999999995.
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(1);
        adam_step(&mut p, &g, &mut st, 0.1, &AdamHyper::default(), "p").unwrap();
        assert!((p.data()[0] - (-0.0999999995)).abs() < 1e-10, "got {}", p.data()[0]);
    }

    #[test]
    fn constant_grad_decreases_param() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(1);
        let mut last = 0.0;
        for _ in 0..2 {
            adam_step(&mut p, &g, &mut st, 0.1, &AdamHyper::default(), "p").unwrap();
            assert!(p.data()[0] < last);
            last = p.data()[0];
        }
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(f64::NAN);
        let mut st = AdamState::new(1);
        let err = adam_step(&mut p, &g, &mut st, 0.1, &AdamHyper::default(), "enc.embed")
            .unwrap_err();
        assert!(err.to_string().contains("enc.embed"));
    }
}
