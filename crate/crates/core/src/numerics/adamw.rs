use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first: Matrix,
    pub second: Matrix,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            first: Matrix::zeros(rows, cols),
            second: Matrix::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn for_param(param: &Matrix) -> Self {
        Self::new(param.rows(), param.cols())
    }

    /// Back to the freshly-initialized state.
    pub fn reset(&mut self) {
        self.first.fill(0.0);
        self.second.fill(0.0);
        self.step = 0;
    }
}

/// One decoupled-weight-decay Adam update of `params` in place.
///
/// Decay is applied first as `p ← p·(1 − lr·λ)`, then the bias-corrected
/// moment step.
pub fn adamw_step(
    params: &mut Matrix,
    grads: &Matrix,
    state: &mut OptimizerState,
    hp: &AdamW,
) -> Result<()> {
    if params.shape() != grads.shape() {
        return Err(Error::Dimension {
            op: "adamw_step",
            left: params.shape(),
            right: grads.shape(),
        });
    }
    if state.first.shape() != params.shape() || state.second.shape() != params.shape() {
        return Err(Error::Dimension {
            op: "adamw_step (moments)",
            left: params.shape(),
            right: state.first.shape(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - hp.lr * hp.weight_decay;

    let p = params.as_mut_slice();
    let m = state.first.as_mut_slice();
    let v = state.second.as_mut_slice();
    for (i, &g) in grads.as_slice().iter().enumerate() {
        p[i] *= decay;
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
    }
    if !params.is_finite() {
        return Err(Error::Numeric("adamw_step produced a non-finite parameter".into()));
    }
    Ok(())
}

/// A trainable tensor together with its optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Matrix,
    pub state: OptimizerState,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let state = OptimizerState::for_param(&value);
        Self { value, state }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn update(&mut self, grad: &Matrix, hp: &AdamW) -> Result<()> {
        adamw_step(&mut self.value, grad, &mut self.state, hp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = Matrix::filled(2, 2, 3.0);
        let g = Matrix::zeros(2, 2);
        let mut s = OptimizerState::for_param(&p);
        let hp = AdamW { lr: 0.1, weight_decay: 0.01, ..AdamW::default() };
        adamw_step(&mut p, &g, &mut s, &hp).unwrap();
        for v in p.as_slice() {
            assert!((v - 3.0 * 0.999).abs() < 1e-15);
        }
        assert!(s.first.as_slice().iter().all(|v| *v == 0.0));
        assert!(s.second.as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut p = Matrix::from_rows(&[vec![0.1, -2.0, 7.5]]).unwrap();
        let before = p.clone();
        let mut s = OptimizerState::for_param(&p);
        let hp = AdamW { weight_decay: 0.0, ..AdamW::default() };
        for _ in 0..5 {
            adamw_step(&mut p, &Matrix::zeros(1, 3), &mut s, &hp).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_normalized_sign_step() {
        let g = Matrix::from_rows(&[vec![0.5, -2.0, 1e-3]]).unwrap();
        let mut p = Matrix::zeros(1, 3);
        let mut s = OptimizerState::for_param(&p);
        let hp = AdamW { lr: 0.01, weight_decay: 0.0, ..AdamW::default() };
        adamw_step(&mut p, &g, &mut s, &hp).unwrap();
        for (pv, gv) in p.as_slice().iter().zip(g.as_slice()) {
            let expected = -0.01 * gv / (gv.abs() + 1e-8);
            assert!((pv - expected).abs() < 1e-12, "{pv} vs {expected}");
        }
    }

    #[test]
    fn two_steps_follow_moment_recurrence() {
        let g = 0.3;
        let hp = AdamW { lr: 0.05, weight_decay: 0.0, ..AdamW::default() };
        let mut p = Matrix::zeros(1, 1);
        let mut s = OptimizerState::for_param(&p);
        let gm = Matrix::filled(1, 1, g);
        adamw_step(&mut p, &gm, &mut s, &hp).unwrap();
        adamw_step(&mut p, &gm, &mut s, &hp).unwrap();
        // m2 = 0.9·0.1g + 0.1g = 0.19g, v2 = 0.999·0.001g² + 0.001g² = 0.001999g²
        let m2 = 0.19 * g;
        let v2 = 0.001999 * g * g;
        assert!((s.first.get(0, 0) - m2).abs() < 1e-15);
        assert!((s.second.get(0, 0) - v2).abs() < 1e-15);
        let step1 = hp.lr * g / (g + hp.eps);
        let mhat = m2 / (1.0 - 0.9f64.powi(2));
        let vhat = v2 / (1.0 - 0.999f64.powi(2));
        let step2 = hp.lr * mhat / (vhat.sqrt() + hp.eps);
        assert!((p.get(0, 0) + step1 + step2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let mut s = OptimizerState::for_param(&p);
        let r = adamw_step(&mut p, &Matrix::zeros(2, 3), &mut s, &AdamW::default());
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}
