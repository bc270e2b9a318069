use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tape::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step, in place. The moments are kept in double
/// precision whatever the parameter type.
pub fn adam_update<T: Real>(params: &mut [T], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != grad.len() {
        return Err(Error::InvalidInput(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite gradient at coordinate {i} (step {})",
            state.step + 1
        )));
    }
    state.step += 1;
    let c1 = 1.0 - BETA1.powi(state.step as i32);
    let c2 = 1.0 - BETA2.powi(state.step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let step = lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
        *p = T::of(p.as_f64() - step);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0f64, -2.0];
        let mut s = AdamState::new(2);
        adam_update(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let g = [3.0, -0.5, 1e-3];
        let mut p = vec![0.0f64; 3];
        let mut s = AdamState::new(3);
        adam_update(&mut p, &g, &mut s, 5e-5).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expected = -5e-5 * gi.signum();
            assert!((pi - expected).abs() < 1e-9, "{pi} vs {expected}");
        }
        for (mi, gi) in s.m.iter().zip(g) {
            assert!((mi - 0.1 * gi).abs() < 1e-15);
        }
        assert_eq!(s.step, 1);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = vec![0.0f32];
        let mut s = AdamState::new(1);
        let err = adam_update(&mut p, &[f64::NAN], &mut s, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn rejects_length_mismatch() {
        let mut p = vec![0.0f64; 2];
        let mut s = AdamState::new(2);
        assert!(adam_update(&mut p, &[1.0], &mut s, 1e-3).is_err());
    }
}
