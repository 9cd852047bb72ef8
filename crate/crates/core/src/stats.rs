//! Per-iteration training statistics, one `stats.jsonl` line each.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsRecord {
    pub stage: String,
    pub iter: usize,
    pub loss: f64,
    pub mean_reward: Option<f64>,
    pub mean_kl: Option<f64>,
    pub clip_frac: Option<f64>,
    pub margin_pos_frac: Option<f64>,
}

impl StatsRecord {
    pub fn loss(stage: &str, iter: usize, loss: f64) -> Self {
        StatsRecord {
            stage: stage.to_string(),
            iter,
            loss,
            mean_reward: None,
            mean_kl: None,
            clip_frac: None,
            margin_pos_frac: None,
        }
    }
}
