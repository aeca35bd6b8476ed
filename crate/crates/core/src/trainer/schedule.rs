use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: u64,
    pub warmup_epochs: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 800,
            warmup_epochs: 10,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "need 0 <= warmup epochs < epochs, got warmup {} of {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }

    pub fn steps(&self, steps_per_epoch: u64) -> StepSchedule {
        StepSchedule {
            warmup: self.warmup_epochs * steps_per_epoch,
            total: self.epochs * steps_per_epoch,
        }
    }
}

/// Warmup and total lengths in optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSchedule {
    pub warmup: u64,
    pub total: u64,
}

/// Linear warmup from 0 to `base`, then cosine decay to 0 at `total`.
pub fn cosine_lr(step: u64, base: f64, schedule: StepSchedule) -> Result<f64> {
    let StepSchedule { warmup, total } = schedule;
    if warmup >= total {
        return Err(Error::Config(format!("warmup of {warmup} steps leaves no decay phase in {total}")));
    }
    if step > total {
        return Err(Error::Precondition(format!("step {step} outside the schedule of {total} steps")));
    }
    if step < warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Target momentum rising from `tau_base` at step 0 to 1 at `total`.
pub fn byol_momentum(step: u64, total: u64, tau_base: f64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let k = step.min(total) as f64 / total as f64;
    1.0 - (1.0 - tau_base) * ((std::f64::consts::PI * k).cos() + 1.0) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: StepSchedule = StepSchedule { warmup: 10, total: 110 };

    #[test]
    fn warmup_and_cosine_landmarks() {
        assert_eq!(cosine_lr(0, 4.0, S).unwrap(), 0.0);
        assert!((cosine_lr(5, 4.0, S).unwrap() - 2.0).abs() < 1e-12);
        assert!((cosine_lr(10, 4.0, S).unwrap() - 4.0).abs() < 1e-12);
        assert!((cosine_lr(60, 4.0, S).unwrap() - 2.0).abs() < 1e-12);
        assert!(cosine_lr(110, 4.0, S).unwrap().abs() < 1e-12);
        assert!(cosine_lr(111, 4.0, S).is_err());
    }

    #[test]
    fn momentum_schedule_endpoints() {
        assert!((byol_momentum(0, 100, 0.996) - 0.996).abs() < 1e-15);
        assert!((byol_momentum(50, 100, 0.996) - 0.998).abs() < 1e-12);
        assert_eq!(byol_momentum(100, 100, 0.996), 1.0);
    }

    #[test]
    fn schedule_validation() {
        assert!(ScheduleConfig { epochs: 10, warmup_epochs: 10 }.validate().is_err());
        assert!(ScheduleConfig::default().validate().is_ok());
        assert_eq!(ScheduleConfig::default().steps(97), StepSchedule { warmup: 970, total: 77600 });
    }
}
