//! SGD with momentum and weight decay.
//!
//! Update rule per trainable slot (the common deep-learning convention):
//! ```text
//! g   <- g + weight_decay * theta
//! buf <- momentum * buf + g
//! theta <- theta - lr * buf
//! ```
//! Batch-norm running statistics are never optimized: their slots are
//! skipped entirely, so neither weight decay nor momentum can drift them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{Layout, ParameterVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Per-slot momentum buffer plus the trainable mask it applies to.
#[derive(Debug, Clone)]
pub struct SgdState {
    buf: Vec<f64>,
    trainable: Vec<bool>,
}

impl SgdState {
    pub fn new(layout: &Layout) -> SgdState {
        SgdState {
            buf: vec![0.0; layout.total],
            trainable: layout.trainable_mask(),
        }
    }
}

/// One optimizer step in place. The gradient must be finite and
/// layout-compatible with `params`.
pub fn sgd_step(
    params: &mut ParameterVector,
    grad: &ParameterVector,
    hyper: &SgdHyper,
    state: &mut SgdState,
) -> Result<()> {
    if grad.len() != params.len() || state.buf.len() != params.len() {
        return Err(Error::Layout(format!(
            "sgd: params {}, grad {}, state {}",
            params.len(),
            grad.len(),
            state.buf.len()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    for i in 0..params.len() {
        if !state.trainable[i] {
            continue;
        }
        let g = grad.values[i] + hyper.weight_decay * params.values[i];
        state.buf[i] = hyper.momentum * state.buf[i] + g;
        params.values[i] -= hyper.lr * state.buf[i];
    }
    Ok(())
}

/// Adam hyperparameters with the customary moment decay rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> AdamHyper {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-slot first/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
    trainable: Vec<bool>,
}

impl AdamState {
    pub fn new(layout: &Layout) -> AdamState {
        AdamState {
            m: vec![0.0; layout.total],
            v: vec![0.0; layout.total],
            t: 0,
            trainable: layout.trainable_mask(),
        }
    }
}

/// One Adam step in place, with bias-corrected moments:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`. Every per-parameter step is
/// bounded by roughly `lr` regardless of the gradient's scale, which keeps
/// saturating stacks (e.g. tanh-squashed generators) optimizable where raw
/// SGD either stalls or blows through the linear range.
pub fn adam_step(
    params: &mut ParameterVector,
    grad: &ParameterVector,
    hyper: &AdamHyper,
    state: &mut AdamState,
) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Layout(format!(
            "adam: params {}, grad {}, state {}",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        if !state.trainable[i] {
            continue;
        }
        let g = grad.values[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.values[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, ModelSpec};

    fn scalar_layout() -> Layout {
        // One affine 1->1: weight + bias = 2 trainable slots.
        Layout::of(&ModelSpec {
            input_shape: vec![1],
            layers: vec![LayerSpec::Affine { inputs: 1, outputs: 1 }],
        })
        .unwrap()
    }

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let layout = scalar_layout();
        let mut params = ParameterVector { values: vec![3.0, -2.0] };
        let mut state = SgdState::new(&layout);
        let grad = ParameterVector { values: vec![0.0, 0.0] };
        let hyper = SgdHyper { lr: 0.5, momentum: 0.9, weight_decay: 0.0 };
        for _ in 0..3 {
            sgd_step(&mut params, &grad, &hyper, &mut state).unwrap();
        }
        assert_eq!(params.values, vec![3.0, -2.0]);
    }

    #[test]
    fn vanilla_step_is_params_minus_lr_grad() {
        let layout = scalar_layout();
        let mut params = ParameterVector { values: vec![1.0, 2.0] };
        let mut state = SgdState::new(&layout);
        let grad = ParameterVector { values: vec![0.5, -1.0] };
        let hyper = SgdHyper { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut params, &grad, &hyper, &mut state).unwrap();
        assert_eq!(params.values, vec![1.0 - 0.05, 2.0 + 0.1]);
    }

    #[test]
    fn momentum_recurrence_matches_hand_iteration() {
        // lr = 0.1, momentum = 0.9, theta_0 = 1, gradient = theta each step:
        // buf_1 = 1, theta_1 = 0.9; buf_2 = 0.9 + 0.9 = 1.8, theta_2 = 0.72.
        let layout = scalar_layout();
        let mut params = ParameterVector { values: vec![1.0, 0.0] };
        let mut state = SgdState::new(&layout);
        let hyper = SgdHyper { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let g1 = ParameterVector { values: vec![params.values[0], 0.0] };
        sgd_step(&mut params, &g1, &hyper, &mut state).unwrap();
        assert!((params.values[0] - 0.9).abs() < 1e-15);
        let g2 = ParameterVector { values: vec![params.values[0], 0.0] };
        sgd_step(&mut params, &g2, &hyper, &mut state).unwrap();
        assert!((params.values[0] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let layout = scalar_layout();
        let mut params = ParameterVector { values: vec![1.0, 0.0] };
        let mut state = SgdState::new(&layout);
        let grad = ParameterVector { values: vec![0.0, 0.0] };
        let hyper = SgdHyper { lr: 1.0, momentum: 0.0, weight_decay: 0.1 };
        sgd_step(&mut params, &grad, &hyper, &mut state).unwrap();
        assert!((params.values[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let layout = scalar_layout();
        let mut params = ParameterVector { values: vec![1.0, 0.0] };
        let mut state = SgdState::new(&layout);
        let grad = ParameterVector { values: vec![f64::NAN, 0.0] };
        let hyper = SgdHyper { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        assert!(matches!(
            sgd_step(&mut params, &grad, &hyper, &mut state),
            Err(Error::NonFiniteGradient)
        ));
    }

    #[test]
    fn adam_first_step_is_lr_times_normalized_gradient() {
        // After one step, m_hat = g and v_hat = g^2 exactly (bias
        // correction cancels the decay), so the update is
        // lr * g / (|g| + eps) — close to lr * sign(g).
        let layout = scalar_layout();
        let mut params = ParameterVector { values: vec![1.0, -2.0] };
        let mut state = AdamState::new(&layout);
        let grad = ParameterVector { values: vec![0.25, -4.0] };
        let hyper = AdamHyper::with_lr(0.01);
        adam_step(&mut params, &grad, &hyper, &mut state).unwrap();
        let expect0 = 1.0 - 0.01 * 0.25 / (0.25 + 1e-8);
        let expect1 = -2.0 - 0.01 * (-4.0) / (4.0 + 1e-8);
        assert!((params.values[0] - expect0).abs() < 1e-15);
        assert!((params.values[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn adam_two_steps_match_hand_iteration() {
        // Constant gradient g = 1, lr = 0.1, default betas.
        // Step 1: m=0.1, v=0.001, m_hat=1, v_hat=1 -> delta ~ 0.1.
        // Step 2: m=0.19, v=0.001999; bc1=0.19, bc2=0.001999
        //         m_hat=1, v_hat=1 -> delta ~ 0.1 again.
        let layout = scalar_layout();
        let mut params = ParameterVector { values: vec![0.0, 0.0] };
        let mut state = AdamState::new(&layout);
        let grad = ParameterVector { values: vec![1.0, 0.0] };
        let hyper = AdamHyper::with_lr(0.1);
        adam_step(&mut params, &grad, &hyper, &mut state).unwrap();
        let after1 = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((params.values[0] - after1).abs() < 1e-12);
        adam_step(&mut params, &grad, &hyper, &mut state).unwrap();
        assert!((params.values[0] - 2.0 * after1).abs() < 1e-10);
    }

    #[test]
    fn adam_skips_running_statistics_and_rejects_non_finite() {
        let spec = ModelSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::BatchNorm { channels: 2 }],
        };
        let layout = Layout::of(&spec).unwrap();
        let mut rng = crate::rng::stream(1, "init");
        let mut params = ParameterVector::init(&layout, &mut rng);
        let before = params.clone();
        let mut state = AdamState::new(&layout);
        let grad = ParameterVector { values: vec![1.0; layout.total] };
        adam_step(&mut params, &grad, &AdamHyper::with_lr(0.1), &mut state).unwrap();
        use crate::nn::params::ParamKind;
        for kind in [ParamKind::RunningMean, ParamKind::RunningVar] {
            let e = layout.entry(0, kind).unwrap();
            assert_eq!(params.slice(e), before.slice(e));
        }
        let bad = ParameterVector { values: vec![f64::INFINITY; layout.total] };
        assert!(matches!(
            adam_step(&mut params, &bad, &AdamHyper::with_lr(0.1), &mut state),
            Err(Error::NonFiniteGradient)
        ));
    }

    #[test]
    fn running_statistics_are_never_touched() {
        let spec = ModelSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::BatchNorm { channels: 2 }],
        };
        let layout = Layout::of(&spec).unwrap();
        let mut rng = crate::rng::stream(0, "init");
        let mut params = ParameterVector::init(&layout, &mut rng);
        let before = params.clone();
        let mut state = SgdState::new(&layout);
        // Adversarial gradient: ones everywhere, including stat slots.
        let grad = ParameterVector { values: vec![1.0; layout.total] };
        let hyper = SgdHyper { lr: 0.1, momentum: 0.9, weight_decay: 0.01 };
        sgd_step(&mut params, &grad, &hyper, &mut state).unwrap();
        use crate::nn::params::ParamKind;
        for kind in [ParamKind::RunningMean, ParamKind::RunningVar] {
            let e = layout.entry(0, kind).unwrap();
            assert_eq!(params.slice(e), before.slice(e));
        }
        for kind in [ParamKind::Gamma, ParamKind::Beta] {
            let e = layout.entry(0, kind).unwrap();
            assert_ne!(params.slice(e), before.slice(e));
        }
    }
}
