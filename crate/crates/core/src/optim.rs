use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 5e-5;

/// Adam moments and hyperparameters for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Applies one update in place. Non-finite gradients leave both the
    /// state and the parameters untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::input(format!(
                "adam state has {} entries, params {} and grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {k} is {}", grads[k])));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(state: &AdamState, params: &[f64], grads: &[f64]) -> Result<(AdamState, Vec<f64>)> {
    let mut next = state.clone();
    let mut out = params.to_vec();
    next.step(&mut out, grads)?;
    Ok((next, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_magnitude() {
        let s = AdamState::new(1, 1e-3);
        let (s1, p) = adam_step(&s, &[0.0], &[1.0]).unwrap();
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s1.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let s = AdamState::new(3, 1e-3);
        let (_, p) = adam_step(&s, &[1.0, -2.0, 0.5], &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn two_step_trace() {
        let lr = 1e-3;
        let s = AdamState::new(1, lr);
        let (s, p) = adam_step(&s, &[0.0], &[1.0]).unwrap();
        let (s, p) = adam_step(&s, &p, &[1.0]).unwrap();
        // m1 = 0.1, v1 = 0.001; m2 = 0.19, v2 = 0.001999
        let m2 = 0.9 * 0.1 + 0.1;
        let v2 = 0.999 * 0.001 + 0.001;
        assert!((s.m[0] - m2).abs() < 1e-12);
        assert!((s.v[0] - v2).abs() < 1e-12);
        let m_hat = m2 / (1.0 - 0.81);
        let v_hat = v2 / (1.0 - 0.999 * 0.999);
        let p2 = -lr / (1.0 + 1e-8) - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - p2).abs() < 1e-12);
        assert_eq!(s.t, 2);
    }

    #[test]
    fn rejects_non_finite_and_mismatched() {
        let s = AdamState::new(2, 1e-3);
        assert!(matches!(adam_step(&s, &[0.0, 0.0], &[f64::NAN, 1.0]), Err(Error::NonFinite(_))));
        assert!(matches!(adam_step(&s, &[0.0], &[1.0]), Err(Error::Input(_))));
        let mut t = s.clone();
        let mut p = [0.5, 0.5];
        assert!(t.step(&mut p, &[1.0, f64::INFINITY]).is_err());
        assert_eq!(t, s);
        assert_eq!(p, [0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn first_step_bounded_by_lr(g in prop::collection::vec(-1e6f64..1e6, 1..6), lr in 1e-6f64..1.0) {
            prop_assume!(g.iter().all(|x| *x != 0.0));
            let s = AdamState::new(g.len(), lr);
            let (_, p) = adam_step(&s, &vec![0.0; g.len()], &g).unwrap();
            for x in p {
                prop_assert!(x.abs() <= lr * (1.0 + 1e-6));
            }
        }

        #[test]
        fn deterministic(g in prop::collection::vec(-10f64..10.0, 3)) {
            let s = AdamState::new(3, 1e-2);
            let a = adam_step(&s, &[0.1, 0.2, 0.3], &g).unwrap();
            let b = adam_step(&s, &[0.1, 0.2, 0.3], &g).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
