use alloc::format;
use core::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warm-up followed by cosine annealing, evaluated per epoch.
///
/// During warm-up the rate is `base · max(epoch, 1) / warmup`, reaching
/// `base` at `epoch == warmup`; afterwards it follows
/// `base · ½(1 + cos(π (epoch − warmup) / (total − warmup)))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineWarmup {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl CosineWarmup {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        if warmup_epochs >= total_epochs {
            return Err(Error::Config(format!(
                "warm-up ({warmup_epochs} epochs) must be shorter than training ({total_epochs})"
            )));
        }
        if !(base_lr.is_finite() && base_lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {base_lr}")));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            total_epochs,
        })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let (w, t) = (self.warmup_epochs, self.total_epochs);
        if epoch < w {
            self.base_lr * epoch.max(1) as f64 / w as f64
        } else {
            let progress = (epoch - w) as f64 / (t - w) as f64;
            self.base_lr * 0.5 * (1.0 + libm::cos(PI * progress))
        }
    }
}

pub fn lr_at(epoch: usize, total_epochs: usize, warmup_epochs: usize, base_lr: f64) -> Result<f64> {
    let s = CosineWarmup::new(base_lr, warmup_epochs, total_epochs)?;
    if epoch >= total_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside schedule of {total_epochs} epochs"
        )));
    }
    Ok(s.lr(epoch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_at_end_of_warmup() {
        assert_eq!(lr_at(10, 60, 10, 0.005).unwrap(), 0.005);
    }

    #[test]
    fn warmup_midpoint() {
        assert_eq!(lr_at(5, 60, 10, 0.004).unwrap(), 0.002);
    }

    #[test]
    fn first_epoch_is_base_over_warmup() {
        assert_eq!(lr_at(0, 60, 10, 0.01).unwrap(), 0.001);
    }

    #[test]
    fn cosine_tail_closed_form() {
        let (t, w, base) = (60usize, 10usize, 0.005);
        let expected = base * 0.5 * (1.0 + libm::cos(PI * (t - 1 - w) as f64 / (t - w) as f64));
        assert!((lr_at(t - 1, t, w, base).unwrap() - expected).abs() < 1e-18);
    }

    #[test]
    fn warmup_not_shorter_than_total() {
        assert!(matches!(lr_at(0, 10, 10, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn no_warmup() {
        assert_eq!(lr_at(0, 4, 0, 1.0).unwrap(), 1.0);
    }
}
