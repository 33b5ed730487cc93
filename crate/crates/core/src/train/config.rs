use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Optimizer, schedule and loop settings. Defaults follow the reference
/// ImageNet recipe except for the epoch count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub eps: f64,
    pub seed: u64,
    pub warmup_steps: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 30,
            batch_size: 128,
            lr_max: 5e-4,
            lr_min: 5e-6,
            betas: [0.9, 0.999],
            weight_decay: 0.05,
            eps: 1e-8,
            seed: 0,
            warmup_steps: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.total_epochs == 0 || self.batch_size == 0 {
            return bad("total_epochs and batch_size must be positive".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_max) {
            return bad(format!(
                "need 0 <= lr_min < lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            ));
        }
        if self.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return bad(format!("betas must lie in (0, 1), got {:?}", self.betas));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("weight_decay must be >= 0 and eps > 0".into());
        }
        Ok(())
    }
}
