use crate::error::{Error, Result};

/// Cosine learning-rate decay stepped once per epoch.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: u32,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr_max: 1.0e-3,
            lr_min: 1.0e-6,
            total_epochs: 40,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min <= self.lr_max) || self.total_epochs < 1 {
            return Err(Error::Contract(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·epoch/total))`.
pub fn cosine_lr(epoch: u32, sched: &Schedule) -> Result<f64> {
    sched.validate()?;
    if epoch > sched.total_epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside 0..={}",
            sched.total_epochs
        )));
    }
    let frac = epoch as f64 / sched.total_epochs as f64;
    Ok(sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = Schedule::default();
        assert!((cosine_lr(0, &s).unwrap() - 1.0e-3).abs() < 1e-18);
        assert!((cosine_lr(40, &s).unwrap() - 1.0e-6).abs() < 1e-18);
        assert!((cosine_lr(20, &s).unwrap() - 5.005e-4).abs() < 1e-15);
    }

    #[test]
    fn monotone_non_increasing() {
        let s = Schedule::default();
        let lrs: Vec<f64> = (0..=40).map(|e| cosine_lr(e, &s).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn out_of_range_epoch_is_rejected() {
        assert!(cosine_lr(41, &Schedule::default()).is_err());
        let bad = Schedule {
            lr_max: 1e-6,
            lr_min: 1e-3,
            total_epochs: 4,
        };
        assert!(cosine_lr(0, &bad).is_err());
    }
}
