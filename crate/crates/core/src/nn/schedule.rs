//! Cosine-annealing learning rate schedule.

use serde::{Deserialize, Serialize};

/// lr(t) = lr_min + (lr_max - lr_min)/2 * (1 + cos(pi * (t mod T) / T))
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Period in epochs.
    pub period: u32,
}

impl LrSchedule {
    pub fn new(lr_max: f64, lr_min: f64, period: u32) -> Self {
        assert!(lr_max > 0.0 && lr_min > 0.0 && period > 0);
        LrSchedule { lr_max, lr_min, period }
    }

    pub fn lr(&self, epoch: u64) -> f64 {
        let t = (epoch % self.period as u64) as f64;
        let cos = (std::f64::consts::PI * t / self.period as f64).cos();
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + cos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn endpoints_and_midpoint() {
        let s = LrSchedule::new(0.003, 0.0001, 10);
        assert_abs_diff_eq!(s.lr(0), 0.003, epsilon = 1e-15);
        // cos(pi/2) = 0 at the half period.
        assert_abs_diff_eq!(s.lr(5), 0.00155, epsilon = 1e-12);
    }

    #[test]
    fn periodic_and_bounded() {
        let s = LrSchedule::new(1e-6, 1e-7, 10);
        for t in 0..100 {
            let lr = s.lr(t);
            assert!(lr >= s.lr_min - 1e-18 && lr <= s.lr_max + 1e-18);
            assert_abs_diff_eq!(lr, s.lr(t + 10), epsilon = 1e-18);
        }
    }
}
