use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `p ← p − lr·g`
    Sgd,
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: beta1(), beta2: beta2(), eps: adam_eps() }
    }
}

/// Per-block optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl MomentState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One update of `params` in place. `step` is only used to label errors.
pub fn optimizer_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut MomentState,
    kind: OptimizerKind,
    lr: f64,
    step: usize,
) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::Precondition(format!(
            "parameter block has {} entries, gradient {}",
            params.len(),
            grad.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(step));
    }
    match kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            if state.m.len() != params.len() {
                *state = MomentState::new(params.len());
            }
            state.t += 1;
            let c1 = 1.0 - beta1.powi(state.t as i32);
            let c2 = 1.0 - beta2.powi(state.t as i32);
            for i in 0..params.len() {
                let g = grad[i];
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_step() {
        let mut p = [1.0];
        optimizer_step(&mut p, &[2.0], &mut MomentState::default(), OptimizerKind::Sgd, 0.1, 0).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameters() {
        let mut p = [0.3, -2.0];
        let mut st = MomentState::new(2);
        optimizer_step(&mut p, &[0.0, 0.0], &mut st, OptimizerKind::default(), 1e-3, 0).unwrap();
        assert_eq!(p, [0.3, -2.0]);
        optimizer_step(&mut p, &[0.0, 0.0], &mut MomentState::default(), OptimizerKind::Sgd, 1.0, 0).unwrap();
        assert_eq!(p, [0.3, -2.0]);
        // Moments only decay under a zero gradient.
        let mut st = MomentState { m: vec![0.5, -0.2], v: vec![0.04, 0.01], t: 3 };
        optimizer_step(&mut p, &[0.0, 0.0], &mut st, OptimizerKind::default(), 1e-3, 0).unwrap();
        assert!((st.m[0] - 0.45).abs() < 1e-15 && (st.m[1] + 0.18).abs() < 1e-15);
        assert!((st.v[0] - 0.04 * 0.999).abs() < 1e-15 && (st.v[1] - 0.01 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_hand_computation() {
        // Two steps on a 2-vector, lr 0.01, default betas, eps 1e-8.
        let kind = OptimizerKind::default();
        let mut p = [1.0, -1.0];
        let mut st = MomentState::new(2);
        optimizer_step(&mut p, &[0.5, -2.0], &mut st, kind, 0.01, 0).unwrap();
        // Step 1: m̂ = g, v̂ = g², update = lr·g/(|g|+eps).
        let want1 = [1.0 - 0.01 * 0.5 / (0.5 + 1e-8), -1.0 + 0.01 * 2.0 / (2.0 + 1e-8)];
        assert!((p[0] - want1[0]).abs() < 1e-12 && (p[1] - want1[1]).abs() < 1e-12);
        optimizer_step(&mut p, &[0.1, 1.0], &mut st, kind, 0.01, 1).unwrap();
        // Step 2, coordinate 0:
        // m = 0.9*0.05 + 0.1*0.1 = 0.055, v = 0.999*0.00025 + 0.001*0.01 = 0.00025975
        let m_hat0 = 0.055 / 0.19;
        let v_hat0 = 0.000_259_75 / (1.0 - 0.999f64 * 0.999);
        // coordinate 1: m = 0.9*(-0.2) + 0.1*1.0 = -0.08, v = 0.999*0.004 + 0.001*1.0 = 0.004996
        let m_hat1 = -0.08 / 0.19;
        let v_hat1 = 0.004_996 / (1.0 - 0.999f64 * 0.999);
        let want2 = [
            want1[0] - 0.01 * m_hat0 / (v_hat0.sqrt() + 1e-8),
            want1[1] - 0.01 * m_hat1 / (v_hat1.sqrt() + 1e-8),
        ];
        assert!((p[0] - want2[0]).abs() < 1e-12, "{} vs {}", p[0], want2[0]);
        assert!((p[1] - want2[1]).abs() < 1e-12, "{} vs {}", p[1], want2[1]);
        assert_eq!(st.t, 2);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut p = [0.0];
        let err = optimizer_step(&mut p, &[f64::NAN], &mut MomentState::default(), OptimizerKind::Sgd, 0.1, 17);
        assert!(matches!(err, Err(Error::NonFiniteGradient(17))));
        assert!(optimizer_step(&mut p, &[1.0, 2.0], &mut MomentState::default(), OptimizerKind::Sgd, 0.1, 0).is_err());
    }
}
