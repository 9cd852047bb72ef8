//! Policy training stages: supervised fine-tuning, PPO, DPO and ReMax.

mod dpo;
mod kl;
mod ppo;
mod remax;
mod sft;

pub use dpo::{dpo_graph, dpo_loss, dpo_train, implicit_margin, DpoBatch, DpoConfig, DpoEval, DpoReport};
pub use kl::{exact_kl, kl_report};
pub use ppo::{gae, ppo_loss_graph, ppo_update, rollout, PpoConfig, PpoState, PpoStats, Rollout, RolloutBatch};
pub use remax::{remax_gradient, remax_loss_graph, remax_update, Baseline, RemaxConfig, RemaxState, RemaxStats};
pub use sft::{sft_loss_graph, sft_train, SftConfig, SftReport};

use crate::error::{Error, Result};
use crate::nn::{adam_step, clip_grad_norm, AdamState, ParamSet};
use crate::policy::EOS;
use crate::reward::RewardModel;

/// Terminal reward for finished completions.
pub trait RewardFn {
    fn rewards(&self, items: &[(&[usize], &[usize])]) -> Result<Vec<f64>>;
}

impl RewardFn for RewardModel {
    /// Scores `prompt ++ completion`, appending EOS to truncated completions
    /// so the score always reads the EOS position.
    fn rewards(&self, items: &[(&[usize], &[usize])]) -> Result<Vec<f64>> {
        let seqs: Vec<Vec<usize>> = items
            .iter()
            .map(|(p, c)| {
                let mut s = p.to_vec();
                s.extend_from_slice(c);
                if c.last() != Some(&EOS) {
                    s.push(EOS);
                }
                s
            })
            .collect();
        self.score_tokens(&seqs)
    }
}

/// Reward looked up from the first completion token; for bandit problems.
#[derive(Debug, Clone, PartialEq)]
pub struct TableReward(pub Vec<f64>);

impl RewardFn for TableReward {
    fn rewards(&self, items: &[(&[usize], &[usize])]) -> Result<Vec<f64>> {
        items
            .iter()
            .map(|(_, c)| {
                let t = *c.first().ok_or_else(|| Error::InvalidArgument("empty completion".into()))?;
                self.0.get(t).copied().ok_or_else(|| Error::InvalidArgument(format!("no reward for token {t}")))
            })
            .collect()
    }
}

/// Clips to unit norm and applies one Adam step.
pub(crate) fn apply_grads(params: &mut ParamSet, mut grads: ParamSet, adam: &mut AdamState, max_norm: f32) -> Result<f64> {
    let norm = clip_grad_norm(&mut grads, max_norm);
    if !norm.is_finite() {
        return Err(Error::Divergence { stage: "optimizer", detail: "non-finite gradient norm".into() });
    }
    adam_step(params, &grads, adam)?;
    Ok(norm)
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub(crate) fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}
