//! Inverse square root learning rate schedule with linear warm-up.

use super::{AutodiffError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64) -> Self {
        LrSchedule { peak_lr, warmup_steps }
    }

    /// Learning rate at 1-based `step`. Linear ramp to the peak over the
    /// warm-up, then decay as `peak * sqrt(warmup / step)`. With zero
    /// warm-up (finetuning mode) the rate starts at the peak and decays as
    /// `peak / sqrt(step)`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "lr_at",
                detail: "step must be >= 1".into(),
            });
        }
        let w = self.warmup_steps;
        let lr = if w == 0 {
            self.peak_lr * (1.0 / step as f64).sqrt()
        } else if step <= w {
            self.peak_lr * step as f64 / w as f64
        } else {
            self.peak_lr * (w as f64 / step as f64).sqrt()
        };
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_reached_at_warmup_end() {
        let s = LrSchedule::new(6.5e-5, 2000);
        assert_eq!(s.lr_at(2000).unwrap(), 6.5e-5);
    }

    #[test]
    fn linear_warmup_midpoint() {
        let s = LrSchedule::new(6.5e-5, 2000);
        assert!((s.lr_at(1000).unwrap() - 3.25e-5).abs() < 1e-18);
    }

    #[test]
    fn inverse_sqrt_decay() {
        let s = LrSchedule::new(6.5e-5, 2000);
        assert!((s.lr_at(8000).unwrap() - 3.25e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_step_is_an_error() {
        assert!(LrSchedule::new(1e-4, 100).lr_at(0).is_err());
    }

    #[test]
    fn warmup_free_mode_starts_at_peak() {
        let s = LrSchedule::new(2e-5, 0);
        assert_eq!(s.lr_at(1).unwrap(), 2e-5);
        assert!((s.lr_at(4).unwrap() - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn continuous_and_monotone_after_warmup() {
        let s = LrSchedule::new(1.0, 50);
        let at_warmup = s.lr_at(50).unwrap();
        let just_after = s.lr_at(51).unwrap();
        assert_eq!(at_warmup, 1.0);
        assert!(just_after <= at_warmup);
        let mut prev = at_warmup;
        for t in 51..200 {
            let lr = s.lr_at(t).unwrap();
            assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
    }
}
