use std::f64::consts::PI;

use crate::error::{Result, TensorError};

/// Half-cosine decay from `eta_max` at step 0 to `eta_min` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    eta_max: f64,
    eta_min: f64,
    total_steps: u64,
}

impl CosineSchedule {
    pub fn new(eta_max: f64, eta_min: f64, total_steps: u64) -> Result<Self> {
        if !(eta_max > 0.0) || !(eta_min >= 0.0) || eta_min > eta_max {
            return Err(TensorError::InvalidSchedule(format!(
                "need 0 <= eta_min <= eta_max and eta_max > 0, got eta_min={eta_min} eta_max={eta_max}"
            )));
        }
        if total_steps == 0 {
            return Err(TensorError::InvalidSchedule("total_steps must be positive".into()));
        }
        Ok(Self {
            eta_max,
            eta_min,
            total_steps,
        })
    }

    pub fn eta_max(&self) -> f64 {
        self.eta_max
    }

    pub fn eta_min(&self) -> f64 {
        self.eta_min
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Learning rate at step `t`. Out-of-range steps are clamped with a warning.
    pub fn lr(&self, t: u64) -> f64 {
        let t = if t > self.total_steps {
            log::warn!(
                "cosine schedule step {t} beyond total {}; clamping",
                self.total_steps
            );
            self.total_steps
        } else {
            t
        };
        let progress = t as f64 / self.total_steps as f64;
        self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = CosineSchedule::new(1e-4, 0.0, 100).unwrap();
        assert_eq!(s.lr(0), 1e-4);
        assert!(s.lr(100).abs() < 1e-20);
        assert!((s.lr(50) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn clamps_past_the_end() {
        let s = CosineSchedule::new(1.0, 0.1, 10).unwrap();
        assert_eq!(s.lr(25), s.lr(10));
    }

    #[test]
    fn monotone_nonincreasing() {
        let s = CosineSchedule::new(3.0, 0.5, 37).unwrap();
        for t in 0..37 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(CosineSchedule::new(0.0, 0.0, 10).is_err());
        assert!(CosineSchedule::new(1.0, 2.0, 10).is_err());
        assert!(CosineSchedule::new(1.0, 0.0, 0).is_err());
    }
}
