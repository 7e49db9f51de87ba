//! AdamW with decoupled weight decay.

use super::params::ParamStore;
use super::{AutodiffError, Result};

/// Optimizer state: first/second moments per parameter, in store order.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64, epsilon: f64) -> Self {
        let first_moment = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        let second_moment = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        AdamWState {
            step_count: 0,
            beta1,
            beta2,
            weight_decay,
            epsilon,
            first_moment,
            second_moment,
        }
    }

    /// One update over every parameter in the store, reading the store's
    /// accumulated gradients. Weight decay is applied directly to the
    /// weights, separately from the moment-based step.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(AutodiffError::InvalidArgument {
                op: "adamw_step",
                detail: format!("lr must be positive, got {lr}"),
            });
        }
        if self.first_moment.len() != store.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adamw_step",
                detail: format!(
                    "state covers {} parameters, store has {}",
                    self.first_moment.len(),
                    store.len()
                ),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (i, (_, p)) in store.iter_mut().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            if m.len() != p.value.numel() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adamw_step",
                    detail: format!("moment size {} vs parameter {} ({})", m.len(), p.value.numel(), p.name),
                });
            }
            for ((theta, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                if !g.is_finite() {
                    return Err(AutodiffError::NonFinite { op: "adamw_step" });
                }
                // Decoupled decay first, then the moment step.
                *theta -= lr * self.weight_decay * *theta;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let denom = v_hat.sqrt() + self.epsilon;
                if m_hat != 0.0 || denom != 0.0 {
                    *theta -= lr * m_hat / denom;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single_param(theta: f64) -> (ParamStore, crate::autodiff::ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("theta", Tensor::scalar(theta));
        (s, id)
    }

    #[test]
    fn zero_betas_collapse_to_sign_update() {
        let (mut s, id) = single_param(1.0);
        s.accumulate_grad(id, &[2.0]);
        let mut st = AdamWState::new(&s, 0.0, 0.0, 0.0, 0.0);
        st.step(&mut s, 0.1).unwrap();
        assert!((s.value(id).item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let (mut s, id) = single_param(1.0);
        let mut st = AdamWState::new(&s, 0.9, 0.999, 0.01, 1e-8);
        st.step(&mut s, 0.1).unwrap();
        assert!((s.value(id).item() - 0.999).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let (mut s, id) = single_param(0.75);
        let mut st = AdamWState::new(&s, 0.9, 0.999, 0.0, 1e-8);
        st.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).item(), 0.75);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        // Hand-rolled reference sequence for theta=0, g=1 on both steps.
        let (beta1, beta2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut theta_ref: f64 = 0.0;
        for t in 1..=2 {
            m = beta1 * m + (1.0 - beta1) * 1.0;
            v = beta2 * v + (1.0 - beta2) * 1.0;
            let m_hat = m / (1.0 - beta1_pow(beta1, t));
            let v_hat = v / (1.0 - beta1_pow(beta2, t));
            theta_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let (mut s, id) = single_param(0.0);
        let mut st = AdamWState::new(&s, beta1, beta2, 0.0, eps);
        for _ in 0..2 {
            s.zero_grads();
            s.accumulate_grad(id, &[1.0]);
            st.step(&mut s, lr).unwrap();
        }
        assert!((s.value(id).item() - theta_ref).abs() < 1e-15);
    }

    fn beta1_pow(b: f64, t: u32) -> f64 {
        b.powi(t as i32)
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut s, id) = single_param(1.0);
        s.accumulate_grad(id, &[f64::NAN]);
        let mut st = AdamWState::new(&s, 0.9, 0.999, 0.0, 1e-8);
        assert!(st.step(&mut s, 0.1).is_err());
    }
}
