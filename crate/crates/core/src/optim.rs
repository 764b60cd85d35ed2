//! AdamW with decoupled weight decay, plus the EMA teacher update.

use crate::tensor::{FloatMode, Tensor};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for '{name}' at element {index}; step rejected")]
    NonFiniteGrad { name: String, index: usize },
    #[error("shape mismatch for '{name}': param {param:?}, grad {grad:?}")]
    GradShape { name: String, param: Vec<usize>, grad: Vec<usize> },
    #[error("optimizer state for '{name}' has shape {state:?}, param {param:?}")]
    StateShape { name: String, state: Vec<usize>, param: Vec<usize> },
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamWState {
    pub fn new(shape: &[usize]) -> AdamWState {
        AdamWState { m: Tensor::zeros(shape), v: Tensor::zeros(shape), t: 0 }
    }
}

/// AdamW over named tensors. Decay is decoupled: the parameter is shrunk by
/// (1 - lr*lambda) before the moment-based update is applied, so the
/// weight-decay schedule multiplies the raw parameter, not the gradient.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    states: BTreeMap<String, AdamWState>,
}

impl Default for AdamW {
    fn default() -> AdamW {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, states: BTreeMap::new() }
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> AdamW {
        AdamW { beta1, beta2, eps, states: BTreeMap::new() }
    }

    pub fn state(&self, name: &str) -> Option<&AdamWState> {
        self.states.get(name)
    }

    pub fn states(&self) -> &BTreeMap<String, AdamWState> {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut BTreeMap<String, AdamWState> {
        &mut self.states
    }

    /// One AdamW update of a single named parameter. On any error the
    /// parameter and state are left untouched.
    pub fn step_param(
        &mut self,
        name: &str,
        param: &mut Tensor,
        grad: &Tensor,
        lr: f64,
        lambda: f64,
        mode: FloatMode,
    ) -> Result<(), OptimError> {
        if param.shape() != grad.shape() {
            return Err(OptimError::GradShape {
                name: name.into(),
                param: param.shape().to_vec(),
                grad: grad.shape().to_vec(),
            });
        }
        if let Some(index) = grad.data().iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGrad { name: name.into(), index });
        }
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamWState::new(param.shape()));
        if state.m.shape() != param.shape() {
            return Err(OptimError::StateShape {
                name: name.into(),
                state: state.m.shape().to_vec(),
                param: param.shape().to_vec(),
            });
        }
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * lambda;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let pd = param.data_mut();
        let md = state.m.data_mut();
        let vd = state.v.data_mut();
        for i in 0..pd.len() {
            let g = grad.data()[i];
            md[i] = b1 * md[i] + (1.0 - b1) * g;
            vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] = pd[i] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
        param.round_to_mode(mode);
        state.m.round_to_mode(mode);
        state.v.round_to_mode(mode);
        Ok(())
    }
}

/// teacher <- m*teacher + (1-m)*student, elementwise.
pub fn ema_update_tensor(teacher: &mut Tensor, student: &Tensor, momentum: f64, mode: FloatMode) {
    debug_assert_eq!(teacher.shape(), student.shape());
    let td = teacher.data_mut();
    for (t, &s) in td.iter_mut().zip(student.data().iter()) {
        *t = momentum * *t + (1.0 - momentum) * s;
    }
    teacher.round_to_mode(mode);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_keeps_param() {
        let mut opt = AdamW::default();
        let mut p = Tensor::from_vec(vec![1.5, -2.0]);
        let g = Tensor::from_vec(vec![0.0, 0.0]);
        opt.step_param("w", &mut p, &g, 0.01, 0.0, FloatMode::F64).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn zero_grad_with_decay_scales_exactly() {
        let mut opt = AdamW::default();
        let mut p = Tensor::from_vec(vec![2.0]);
        let g = Tensor::from_vec(vec![0.0]);
        let (lr, lambda) = (0.1, 0.04);
        opt.step_param("w", &mut p, &g, lr, lambda, FloatMode::F64).unwrap();
        assert_eq!(p.data()[0], 2.0 * (1.0 - lr * lambda));
    }

    #[test]
    fn first_step_matches_hand_adam() {
        // g=1, t=1: m=0.1, v=0.001, mhat=1, vhat=1, update = -lr/(1+eps).
        let mut opt = AdamW::new(0.9, 0.999, 1e-8);
        let mut p = Tensor::from_vec(vec![0.0]);
        let g = Tensor::from_vec(vec![1.0]);
        let lr = 0.05;
        opt.step_param("w", &mut p, &g, lr, 0.0, FloatMode::F64).unwrap();
        let expect = -lr * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-15, "{} vs {expect}", p.data()[0]);
        let st = opt.state("w").unwrap();
        assert!((st.m.data()[0] - 0.1).abs() < 1e-15);
        assert!((st.v.data()[0] - 0.001).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn non_finite_grad_rejected_state_unchanged() {
        let mut opt = AdamW::default();
        let mut p = Tensor::from_vec(vec![1.0]);
        let good = Tensor::from_vec(vec![0.5]);
        opt.step_param("w", &mut p, &good, 0.01, 0.0, FloatMode::F64).unwrap();
        let before_p = p.clone();
        let before_m = opt.state("w").unwrap().m.clone();
        let bad = Tensor::from_vec(vec![f64::NAN]);
        let err = opt.step_param("w", &mut p, &bad, 0.01, 0.0, FloatMode::F64).unwrap_err();
        assert!(matches!(err, OptimError::NonFiniteGrad { .. }));
        assert_eq!(p.data(), before_p.data());
        assert_eq!(opt.state("w").unwrap().m.data(), before_m.data());
        assert_eq!(opt.state("w").unwrap().t, 1);
    }

    #[test]
    fn steps_are_bit_reproducible() {
        let run = || {
            let mut opt = AdamW::default();
            let mut p = Tensor::from_vec(vec![0.3, -0.7, 1.1]);
            for k in 0..25 {
                let g = Tensor::from_vec(vec![0.1 * k as f64, -0.2, 0.05 * k as f64]);
                opt.step_param("w", &mut p, &g, 0.002, 0.04, FloatMode::F32).unwrap();
            }
            p.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ema_endpoints_and_bounds() {
        let s = Tensor::from_vec(vec![0.0, 4.0]);
        let mut t1 = Tensor::from_vec(vec![1.0, 2.0]);
        ema_update_tensor(&mut t1, &s, 1.0, FloatMode::F64);
        assert_eq!(t1.data(), &[1.0, 2.0]);
        let mut t0 = Tensor::from_vec(vec![1.0, 2.0]);
        ema_update_tensor(&mut t0, &s, 0.0, FloatMode::F64);
        assert_eq!(t0.data(), &[0.0, 4.0]);
        let mut tm = Tensor::from_vec(vec![1.0]);
        ema_update_tensor(&mut tm, &Tensor::from_vec(vec![0.0]), 0.992, FloatMode::F64);
        assert!((tm.data()[0] - 0.992).abs() < 1e-15);
        // Result stays inside [min(teacher, student), max(teacher, student)].
        let mut t = Tensor::from_vec(vec![-3.0, 5.0]);
        let s2 = Tensor::from_vec(vec![2.0, -1.0]);
        ema_update_tensor(&mut t, &s2, 0.37, FloatMode::F64);
        assert!(t.data()[0] >= -3.0 && t.data()[0] <= 2.0);
        assert!(t.data()[1] >= -1.0 && t.data()[1] <= 5.0);
    }
}
