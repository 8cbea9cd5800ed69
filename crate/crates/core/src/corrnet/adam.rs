use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: grads.len().min(state.m.len()) });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut s = AdamState::new(2);
        let mut p = vec![0.5, -0.5];
        adam_step(&mut s, &mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, vec![0.5, -0.5]);
        s.m = vec![1.0, -1.0];
        s.v = vec![1.0, 1.0];
        adam_step(&mut s, &mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(s.m, vec![0.9, -0.9]);
        assert_eq!(s.v, vec![0.999, 0.999]);
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let mut s = AdamState::new(3);
        let mut p = vec![0.0; 3];
        let g = [2.0, -0.5, 1e-3];
        for _ in 0..2000 {
            let before = p.clone();
            adam_step(&mut s, &mut p, &g, 0.01).unwrap();
            for k in 0..3 {
                let delta = p[k] - before[k];
                assert!((delta.abs() - 0.01).abs() < 1e-4);
                assert_eq!(delta.signum(), -g[k].signum());
            }
        }
    }

    #[test]
    fn length_mismatch() {
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut s, &mut [0.0; 2], &[0.0; 3], 0.1).is_err());
    }
}
