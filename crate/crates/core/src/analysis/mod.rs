//! Parameter/FLOP accounting and attention rollout heatmaps.

mod cost;
mod pgm;
mod rollout;

pub use cost::{count_flops, count_params, CostReport, CostRow, CostTotals};
pub use pgm::{export_heatmap, pgm_bytes};
pub use rollout::{
    attention_rollout, class_token_map, joint_attention, min_max_normalize, AttentionRecord,
    Rollout,
};
