//! ReMax: REINFORCE with the greedy completion's reward as the baseline.

use serde::{Deserialize, Serialize};

use super::{apply_grads, mean, variance, RewardFn};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Graph, ParamSet, ParamVars, Tensor, Var};
use crate::policy::{batch_token_log_probs, segment_sums, token_log_probs, CompletionBatch, DecodeMode, PolicyModel, TransformerConfig};
use crate::seed;
use crate::stats::StatsRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Reward of the greedy completion (ReMax).
    Greedy,
    /// No baseline (plain REINFORCE).
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemaxConfig {
    pub beta: f64,
    pub lr: f32,
    pub max_tokens: usize,
    pub temperature: f32,
    pub baseline: Baseline,
    pub seed: u64,
}

impl Default for RemaxConfig {
    fn default() -> Self {
        let ppo = super::PpoConfig::default();
        RemaxConfig {
            beta: ppo.beta,
            lr: ppo.lr,
            max_tokens: ppo.max_tokens,
            temperature: 1.0,
            baseline: Baseline::Greedy,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemaxStats {
    pub iter: usize,
    pub loss: f64,
    /// Mean KL-shaped reward of the sampled completions.
    pub mean_reward: f64,
    /// Mean of `R(sample) - R(baseline)`.
    pub mean_advantage: f64,
    /// Sample variance of the per-prompt advantages.
    pub advantage_var: f64,
    pub mean_kl: f64,
}

impl RemaxStats {
    pub fn record(&self) -> StatsRecord {
        StatsRecord {
            stage: "remax".into(),
            iter: self.iter,
            loss: self.loss,
            mean_reward: Some(self.mean_reward),
            mean_kl: Some(self.mean_kl),
            clip_frac: None,
            margin_pos_frac: None,
        }
    }
}

/// `r(q, a) - beta * sum_t (log pi - log pi_ref)` for each completion, plus
/// the per-token log-ratios.
fn shaped_rewards(
    policy: &PolicyModel,
    reward: &dyn RewardFn,
    pairs: &[(&[usize], &[usize])],
    beta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cb = CompletionBatch::new(&policy.config, pairs)?;
    let lp = batch_token_log_probs(&policy.config, &policy.params, &cb)?;
    let rp = batch_token_log_probs(&policy.config, policy.reference()?, &cb)?;
    let r = reward.rewards(pairs)?;
    let mut out = Vec::with_capacity(pairs.len());
    let mut ratios = Vec::with_capacity(lp.len());
    let mut off = 0;
    for (&len, ri) in cb.segments.iter().zip(r) {
        let kl: f64 = (off..off + len).map(|i| (lp[i] - rp[i]) as f64).sum();
        ratios.extend((off..off + len).map(|i| (lp[i] - rp[i]) as f64));
        out.push(ri - beta * kl);
        off += len;
    }
    Ok((out, ratios))
}

/// Surrogate `-(1/B) sum_i adv_i log pi(a_i)`; its gradient is the negated
/// score-function estimate.
pub fn remax_loss_graph(g: &mut Graph, p: &ParamVars, cfg: &TransformerConfig, cb: &CompletionBatch, advantages: &[f64]) -> Result<Var> {
    let b = cb.segments.len();
    if advantages.len() != b {
        return Err(Error::InvalidArgument(format!("{} advantages for {b} completions", advantages.len())));
    }
    let lp = token_log_probs(g, p, cfg, cb)?;
    let seq = segment_sums(g, lp, &cb.segments)?;
    let coef = g.constant(Tensor::new(vec![b, 1], advantages.iter().map(|&a| (a / b as f64) as f32).collect())?)?;
    let weighted = g.mul(seq, coef)?;
    let total = g.sum(weighted)?;
    g.neg(total)
}

/// Gradient of the surrogate loss `-(1/B) sum_i (R(a_s) - b_i) log pi(a_s)`,
/// i.e. the negated ReMax estimate of the policy gradient.
pub fn remax_gradient(
    policy: &PolicyModel,
    reward: &dyn RewardFn,
    prompts: &[Vec<usize>],
    cfg: &RemaxConfig,
    seed: u64,
) -> Result<(ParamSet, RemaxStats)> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("remax needs at least one prompt".into()));
    }
    let mut sampled = Vec::with_capacity(prompts.len());
    let mut greedy = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let room = policy.config.context_length.saturating_sub(prompt.len());
        let max = cfg.max_tokens.min(room);
        let mode = DecodeMode::Sample { temperature: cfg.temperature, seed: seed::mix(seed, i as u64) };
        sampled.push(policy.generate(prompt, mode, max)?.tokens);
        if cfg.baseline == Baseline::Greedy {
            greedy.push(policy.generate(prompt, DecodeMode::Greedy, max)?.tokens);
        }
    }
    let s_pairs: Vec<(&[usize], &[usize])> = prompts.iter().zip(&sampled).map(|(p, c)| (&p[..], &c[..])).collect();
    let (r_s, ratios) = shaped_rewards(policy, reward, &s_pairs, cfg.beta)?;
    let base = match cfg.baseline {
        Baseline::Greedy => {
            let g_pairs: Vec<(&[usize], &[usize])> = prompts.iter().zip(&greedy).map(|(p, c)| (&p[..], &c[..])).collect();
            shaped_rewards(policy, reward, &g_pairs, cfg.beta)?.0
        }
        Baseline::None => vec![0.0; prompts.len()],
    };
    let adv: Vec<f64> = r_s.iter().zip(&base).map(|(r, b)| r - b).collect();
    let cb = CompletionBatch::new(&policy.config, &s_pairs)?;
    let mut g = Graph::new();
    let p = g.params(&policy.params)?;
    let loss = remax_loss_graph(&mut g, &p, &policy.config, &cb, &adv)?;
    let grads = g.backward(loss)?.params(&g, &p)?;
    let stats = RemaxStats {
        iter: 0,
        loss: g.value(loss).item() as f64,
        mean_reward: mean(&r_s),
        mean_advantage: mean(&adv),
        advantage_var: variance(&adv),
        mean_kl: mean(&ratios),
    };
    Ok((grads, stats))
}

#[derive(Debug, Clone)]
pub struct RemaxState {
    pub adam: AdamState,
    pub iter: usize,
}

impl RemaxState {
    pub fn new(policy: &PolicyModel, cfg: &RemaxConfig) -> Self {
        RemaxState { adam: AdamState::new(&policy.params, AdamConfig::with_lr(cfg.lr)), iter: 0 }
    }
}

/// One ReMax step on `prompts`.
pub fn remax_update(
    policy: &mut PolicyModel,
    state: &mut RemaxState,
    reward: &dyn RewardFn,
    prompts: &[Vec<usize>],
    cfg: &RemaxConfig,
) -> Result<RemaxStats> {
    let (grads, mut stats) = remax_gradient(policy, reward, prompts, cfg, seed::mix(cfg.seed, state.iter as u64))?;
    apply_grads(&mut policy.params, grads, &mut state.adam, 1.0)?;
    stats.iter = state.iter;
    state.iter += 1;
    Ok(stats)
}
