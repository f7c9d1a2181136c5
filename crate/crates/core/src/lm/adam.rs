//! Adam with bias correction; beta1 = 0.9, beta2 = 0.999, eps = 1e-8.

use serde::{Deserialize, Serialize};

use super::model::LmParams;
use super::LmError;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment estimates, one pair of buffers per parameter tensor
/// in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &LmParams) -> Self {
        let m: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

fn update_slice(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64) {
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    for i in 0..w.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
}

/// One optimizer step. Rejects non-finite gradients before touching any
/// state, so a failed step leaves `params` and `state` untouched.
pub fn adam_step(
    params: &mut LmParams,
    grads: &LmParams,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), LmError> {
    for (name, tensor) in params.tensor_names().iter().zip(grads.tensors()) {
        if !tensor.is_finite() {
            return Err(LmError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let step = state.step;
    for (i, (w, g)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .enumerate()
    {
        update_slice(&mut w.data, &g.data, &mut state.m[i], &mut state.v[i], step, lr);
    }
    debug_assert!(params.is_finite());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::config::LmConfig;

    fn params(seed: u64) -> LmParams {
        LmParams::init(LmConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            context_len: 8,
            vocab_size: 5,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = params(1);
        let before = p.clone();
        let grads = p.zeros_like();
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut state, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = params(2);
        let before = p.clone();
        let mut grads = p.zeros_like();
        grads.layers[0].ff_w1.data[3] = f64::NAN;
        let mut state = AdamState::new(&p);
        match adam_step(&mut p, &grads, &mut state, 0.1) {
            Err(LmError::NonFiniteGradient(name)) => assert_eq!(name, "layer0.ff_w1"),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn single_step_descends_on_square() {
        // f(w) = w^2 from w = 1, lr = 0.1
        let mut w = [1.0];
        let mut m = [0.0];
        let mut v = [0.0];
        update_slice(&mut w, &[2.0], &mut m, &mut v, 1, 0.1);
        assert!(w[0] < 1.0);
    }

    #[test]
    fn quadratic_converges_within_2000_steps() {
        let mut w = [1.0];
        let mut m = [0.0];
        let mut v = [0.0];
        let mut loss = 1.0;
        for step in 1..=2000u64 {
            let g = [2.0 * w[0]];
            update_slice(&mut w, &g, &mut m, &mut v, step, 0.1);
            loss = w[0] * w[0];
            if loss < 1e-6 {
                break;
            }
        }
        assert!(loss < 1e-6, "loss after 2000 steps: {loss}");
    }
}
