use std::f64::consts::PI;

use super::TrainConfig;
use crate::error::{Error, Result};

/// One-cycle cosine learning rate.
///
/// During `warmup_steps` the rate rises linearly from `lr_min` to `lr_max`;
/// afterwards `lr = lr_min + ½(lr_max − lr_min)(1 + cos πt)` with `t` the
/// post-warmup progress in `[0, 1]`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    let warmup_too_long = cfg.warmup_steps > 0 && cfg.warmup_steps >= total_steps;
    if total_steps == 0 || step > total_steps || warmup_too_long {
        return Err(Error::Contract(format!(
            "lr_at: step {step} outside schedule of {total_steps} steps (warmup {})",
            cfg.warmup_steps
        )));
    }
    let (lo, hi) = (cfg.lr_min, cfg.lr_max);
    if step < cfg.warmup_steps {
        return Ok(lo + (hi - lo) * step as f64 / cfg.warmup_steps as f64);
    }
    let t = (step - cfg.warmup_steps) as f64 / (total_steps - cfg.warmup_steps) as f64;
    Ok(lo + 0.5 * (hi - lo) * (1.0 + (PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 100, &cfg).unwrap(), 5e-4);
        assert!((lr_at(100, 100, &cfg).unwrap() - 5e-6).abs() < 1e-18);
        assert!((lr_at(50, 100, &cfg).unwrap() - 2.525e-4).abs() < 1e-15);
        assert!(matches!(lr_at(101, 100, &cfg), Err(Error::Contract(_))));
        assert!(lr_at(0, 0, &cfg).is_err());
    }

    #[test]
    fn monotone_after_warmup() {
        let cfg = TrainConfig {
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, 200, &cfg).unwrap(), cfg.lr_min);
        assert_eq!(lr_at(10, 200, &cfg).unwrap(), cfg.lr_max);
        let mut prev = f64::INFINITY;
        for s in 10..=200 {
            let lr = lr_at(s, 200, &cfg).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
