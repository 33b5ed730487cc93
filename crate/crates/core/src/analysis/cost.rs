//! Closed-form parameter and MAC counts.
//!
//! One multiply-accumulate counts as one FLOP. Element-wise work (GELU,
//! softmax, residual adds, LayerNorm, gains, context broadcasting, chart
//! averaging) is not counted.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::KeyKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: ModelConfig,
    /// `[C, H, W]` of the single image the FLOPs refer to.
    pub input_shape: Vec<usize>,
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

impl CostReport {
    pub fn params_millions(&self) -> f64 {
        self.totals.params as f64 / 1e6
    }

    pub fn flops_giga(&self) -> f64 {
        self.totals.flops as f64 / 1e9
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }

    fn push(&mut self, name: impl Into<String>, params: usize, flops: usize) {
        let (params, flops) = (params as u64, flops as u64);
        self.totals.params += params;
        self.totals.flops += flops;
        self.rows.push(CostRow {
            name: name.into(),
            params,
            flops,
        });
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(0)
            .max(9);
        writeln!(
            f,
            "{:<width$}  {:>14}  {:>16}",
            "component", "params", "flops (MAC)"
        )?;
        for r in &self.rows {
            writeln!(f, "{:<width$}  {:>14}  {:>16}", r.name, r.params, r.flops)?;
        }
        writeln!(
            f,
            "{:<width$}  {:>14}  {:>16}",
            "total", self.totals.params, self.totals.flops
        )?;
        write!(
            f,
            "{} ({}, H={}): {:.2}M params, {:.2}G FLOPs at {:?}",
            self.config.variant.kind.name(),
            if self.config.variant.uses_cb() {
                "cb"
            } else {
                "no cb"
            },
            self.config.variant.charts,
            self.params_millions(),
            self.flops_giga(),
            self.input_shape
        )
    }
}

/// Counts at the configured image size.
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    count_flops(
        config,
        &[config.channels, config.image_size, config.image_size],
    )
}

/// Per-component parameters and MACs for one `[C, H, W]` image.
pub fn count_flops(config: &ModelConfig, input_shape: &[usize]) -> Result<CostReport> {
    config.validate()?;
    let expected = [config.channels, config.image_size, config.image_size];
    if input_shape != expected {
        return Err(Error::shape("count_flops input", input_shape, &expected));
    }
    let c = config;
    let (d, m, n) = (c.dim, c.mlp_dim, c.tokens());
    let patches = n - 1;
    let mut r = CostReport {
        config: c.clone(),
        input_shape: input_shape.to_vec(),
        rows: Vec::new(),
        totals: CostTotals {
            params: 0,
            flops: 0,
        },
    };
    r.push(
        "patch_embed",
        c.patch_dim() * d + d,
        patches * c.patch_dim() * d,
    );
    r.push("cls_token", d, 0);
    r.push("pos_embed", n * d, 0);
    let spec = c.variant;
    let h = spec.charts;
    for i in 0..c.depth {
        let p = format!("blocks.{i}");
        r.push(format!("{p}.norm1"), 2 * d, 0);
        r.push(format!("{p}.attn.qv"), 2 * d * d + 2 * d, 2 * n * d * d);
        match spec.kind {
            KeyKind::Baseline => r.push(format!("{p}.attn.key.w_k"), d * d + d, n * d * d),
            kind => {
                r.push(format!("{p}.attn.key.expand"), h * d * d, n * h * d * d);
                r.push(format!("{p}.attn.key.gamma"), h * d, 0);
                let mix = if kind == KeyKind::SimpleK {
                    "condense"
                } else {
                    "mix"
                };
                r.push(format!("{p}.attn.key.{mix}"), h * n * n, h * n * n * d);
                if matches!(kind, KeyKind::SpatialK | KeyKind::Kua) {
                    r.push(format!("{p}.attn.key.to_out"), h * d * d, n * h * d * d);
                }
                if spec.uses_cb() {
                    r.push(format!("{p}.attn.key.gamma_prime"), d, 0);
                }
            }
        }
        // QKᵀ and scores·V over all heads
        r.push(format!("{p}.attn.scores"), 0, 2 * n * n * d);
        r.push(format!("{p}.attn.out"), d * d + d, n * d * d);
        r.push(format!("{p}.norm2"), 2 * d, 0);
        r.push(format!("{p}.mlp"), d * m + m + m * d + d, 2 * n * d * m);
    }
    r.push("norm", 2 * d, 0);
    r.push("head", d * c.num_classes + c.num_classes, d * c.num_classes);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{GammaInit, KeyVariantSpec};

    #[test]
    fn totals_are_row_sums() {
        let r = count_params(&ModelConfig::vit_s16(KeyVariantSpec::kua(8))).unwrap();
        let p: u64 = r.rows.iter().map(|x| x.params).sum();
        let f: u64 = r.rows.iter().map(|x| x.flops).sum();
        assert_eq!((p, f), (r.totals.params, r.totals.flops));
    }

    #[test]
    fn degenerate_model_by_hand() {
        // dim 1, one patch (N = 2), mlp 1, 1 class, 1 channel, 1×1 patch.
        let c = ModelConfig {
            image_size: 1,
            patch_size: 1,
            channels: 1,
            dim: 1,
            depth: 1,
            heads: 1,
            mlp_dim: 1,
            num_classes: 1,
            variant: KeyVariantSpec::baseline(),
            gamma_init: GammaInit::Ones,
        };
        let r = count_params(&c).unwrap();
        // patch 1 + q,v 2·2 + k 2 + scores 2·4 + out 2 + mlp 2·2 + head 1
        assert_eq!(r.totals.flops, 1 + 4 + 2 + 8 + 2 + 4 + 1);
        // patch 2 + cls 1 + pos 2 + ln 2 + qv 4 + k 2 + out 2 + ln 2 + mlp 4 + norm 2 + head 2
        assert_eq!(r.totals.params, 25);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let c = ModelConfig::vit_s16(KeyVariantSpec::baseline());
        assert!(count_flops(&c, &[3, 192, 192]).is_err());
    }
}
