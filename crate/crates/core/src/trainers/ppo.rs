//! PPO against a learned reward with a per-token KL penalty to the
//! reference policy.

use serde::{Deserialize, Serialize};

use super::{apply_grads, mean, RewardFn};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Graph, ParamSet, ParamVars, Tensor, Var};
use crate::policy::{
    completion_hidden, linear_head, token_log_probs_from_hidden, CompletionBatch, DecodeMode, PolicyModel,
    TransformerConfig,
};
use crate::seed;
use crate::stats::StatsRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// KL penalty coefficient.
    pub beta: f64,
    pub clip: f32,
    pub rollouts_per_update: usize,
    pub inner_epochs: usize,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub value_coef: f32,
    pub max_tokens: usize,
    pub lr: f32,
    pub temperature: f32,
    /// Normalize advantages to zero mean and unit variance per batch.
    pub whiten_advantages: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            beta: 0.1,
            clip: 0.2,
            rollouts_per_update: 8,
            inner_epochs: 4,
            gae_lambda: 0.95,
            gamma: 1.0,
            value_coef: 0.5,
            max_tokens: 64,
            lr: 1e-4,
            temperature: 1.0,
            whiten_advantages: true,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::InvalidArgument("ppo needs beta >= 0 and 0 < clip < 1".into()));
        }
        if self.rollouts_per_update == 0 || self.inner_epochs == 0 || self.max_tokens == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("ppo rollouts, epochs, max_tokens and lr must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled completion with everything the update needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt: Vec<usize>,
    pub completion: Vec<usize>,
    pub logp: Vec<f32>,
    pub ref_logp: Vec<f32>,
    pub values: Vec<f32>,
    /// Terminal reward from the reward function.
    pub reward: f64,
    /// `-beta * (logp - ref_logp)` per token, plus `reward` on the last.
    pub shaped: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub samples: Vec<Rollout>,
}

impl RolloutBatch {
    pub fn mean_reward(&self) -> f64 {
        mean(&self.samples.iter().map(|s| s.reward).collect::<Vec<_>>())
    }

    /// Mean over all sampled tokens of `logp - ref_logp`.
    pub fn mean_kl(&self) -> f64 {
        let d: Vec<f64> = self
            .samples
            .iter()
            .flat_map(|s| s.logp.iter().zip(&s.ref_logp).map(|(a, b)| (*a - *b) as f64))
            .collect();
        mean(&d)
    }

    fn pairs(&self) -> Vec<(&[usize], &[usize])> {
        self.samples.iter().map(|s| (&s.prompt[..], &s.completion[..])).collect()
    }

    fn flat<T: Copy>(&self, f: impl Fn(&Rollout) -> &[T]) -> Vec<T> {
        self.samples.iter().flat_map(|s| f(s).iter().copied()).collect()
    }
}

/// Generalized advantage estimation over one episode; the value after the
/// last token is 0.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Policy and value heads for the pending PPO run.
#[derive(Debug, Clone)]
pub struct PpoState {
    pub value_head: ParamSet,
    pub adam: AdamState,
    pub iter: usize,
}

impl PpoState {
    pub fn new(policy: &PolicyModel, cfg: &PpoConfig) -> Result<Self> {
        let mut value_head = ParamSet::new();
        value_head.insert("value.w", Tensor::zeros(&[policy.config.d_model, 1]))?;
        value_head.insert("value.b", Tensor::zeros(&[1]))?;
        let merged = policy.params.merged(&value_head)?;
        Ok(PpoState { value_head, adam: AdamState::new(&merged, AdamConfig::with_lr(cfg.lr)), iter: 0 })
    }
}

fn log_probs_and_values(
    cfg: &TransformerConfig,
    params: &ParamSet,
    cb: &CompletionBatch,
    with_values: bool,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut g = Graph::new();
    let p = g.frozen(params)?;
    let h = completion_hidden(&mut g, &p, cfg, cb)?;
    let lp = token_log_probs_from_hidden(&mut g, &p, cb, h)?;
    let values = if with_values {
        let v = linear_head(&mut g, &p, "value", h)?;
        g.value(v).data().to_vec()
    } else {
        Vec::new()
    };
    Ok((g.value(lp).data().to_vec(), values))
}

/// Samples one completion per prompt and scores, shapes and advantages them.
pub fn rollout(
    policy: &PolicyModel,
    value_head: &ParamSet,
    reward: &dyn RewardFn,
    prompts: &[Vec<usize>],
    cfg: &PpoConfig,
    seed: u64,
) -> Result<RolloutBatch> {
    let reference = policy.reference()?;
    let mut samples = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let room = policy.config.context_length.saturating_sub(prompt.len());
        let mode = DecodeMode::Sample { temperature: cfg.temperature, seed: seed::mix(seed, i as u64) };
        let gen = policy.generate(prompt, mode, cfg.max_tokens.min(room))?;
        samples.push(Rollout {
            prompt: prompt.clone(),
            completion: gen.tokens,
            logp: Vec::new(),
            ref_logp: Vec::new(),
            values: Vec::new(),
            reward: 0.0,
            shaped: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
        });
    }
    let mut batch = RolloutBatch { samples };
    let pairs = batch.pairs();
    let cb = CompletionBatch::new(&policy.config, &pairs)?;
    let merged = policy.params.merged(value_head)?;
    let (logp, values) = log_probs_and_values(&policy.config, &merged, &cb, true)?;
    let (ref_logp, _) = log_probs_and_values(&policy.config, reference, &cb, false)?;
    let rewards = reward.rewards(&pairs)?;
    let mut off = 0;
    for (s, r) in batch.samples.iter_mut().zip(rewards) {
        let n = s.completion.len();
        s.logp = logp[off..off + n].to_vec();
        s.ref_logp = ref_logp[off..off + n].to_vec();
        s.values = values[off..off + n].to_vec();
        s.reward = r;
        s.shaped = s.logp.iter().zip(&s.ref_logp).map(|(a, b)| -cfg.beta * (*a - *b) as f64).collect();
        s.shaped[n - 1] += r;
        let v: Vec<f64> = s.values.iter().map(|&x| x as f64).collect();
        let (adv, ret) = gae(&s.shaped, &v, cfg.gamma, cfg.gae_lambda);
        s.advantages = adv;
        s.returns = ret;
        off += n;
    }
    Ok(batch)
}

/// Clipped surrogate plus value regression; returns (loss, ratio).
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss_graph(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &TransformerConfig,
    cb: &CompletionBatch,
    old_logp: &[f32],
    advantages: &[f32],
    returns: &[f32],
    clip: f32,
    value_coef: f32,
) -> Result<(Var, Var)> {
    let n = cb.num_targets();
    let h = completion_hidden(g, p, cfg, cb)?;
    let lp = token_log_probs_from_hidden(g, p, cb, h)?;
    let old = g.constant(Tensor::from_vec(old_logp.to_vec()))?;
    let adv = g.constant(Tensor::from_vec(advantages.to_vec()))?;
    let diff = g.sub(lp, old)?;
    let ratio = g.exp(diff)?;
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let s2 = g.mul(clipped, adv)?;
    let surr = g.minimum(s1, s2)?;
    let surr = g.mean(surr)?;
    let policy_loss = g.neg(surr)?;
    let v = linear_head(g, p, "value", h)?;
    let v = g.reshape(v, &[n])?;
    let ret = g.constant(Tensor::from_vec(returns.to_vec()))?;
    let err = g.sub(v, ret)?;
    let sq = g.mul(err, err)?;
    let vloss = g.mean(sq)?;
    let vloss = g.scale(vloss, value_coef)?;
    Ok((g.add(policy_loss, vloss)?, ratio))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoStats {
    pub iter: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_frac: f64,
}

impl PpoStats {
    pub fn record(&self) -> StatsRecord {
        StatsRecord {
            stage: "ppo".into(),
            iter: self.iter,
            loss: self.loss,
            mean_reward: Some(self.mean_reward),
            mean_kl: Some(self.mean_kl),
            clip_frac: Some(self.clip_frac),
            margin_pos_frac: None,
        }
    }
}

fn whiten(xs: &mut [f64]) {
    if xs.len() < 2 {
        return;
    }
    let m = mean(xs);
    let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt();
    for x in xs.iter_mut() {
        *x = (*x - m) / (sd + 1e-8);
    }
}

/// One PPO iteration: rollouts on `prompts`, then `inner_epochs` full-batch
/// steps on the clipped surrogate and value loss.
pub fn ppo_update(
    policy: &mut PolicyModel,
    state: &mut PpoState,
    reward: &dyn RewardFn,
    prompts: &[Vec<usize>],
    cfg: &PpoConfig,
) -> Result<PpoStats> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("ppo needs at least one prompt".into()));
    }
    let batch = rollout(policy, &state.value_head, reward, prompts, cfg, seed::mix(cfg.seed, state.iter as u64))?;
    let mean_kl = batch.mean_kl();
    if mean_kl > 10.0 {
        return Err(Error::KlExplosion(mean_kl));
    }
    let pairs = batch.pairs();
    let cb = CompletionBatch::new(&policy.config, &pairs)?;
    let old = batch.flat(|s| &s.logp);
    let mut adv = batch.flat(|s| &s.advantages);
    if cfg.whiten_advantages {
        whiten(&mut adv);
    }
    let adv: Vec<f32> = adv.iter().map(|&a| a as f32).collect();
    let ret: Vec<f32> = batch.flat(|s| &s.returns).iter().map(|&r| r as f32).collect();
    let mut merged = policy.params.merged(&state.value_head)?;
    let mut last_loss = 0.0;
    let mut clipped = 0usize;
    for _ in 0..cfg.inner_epochs {
        let mut g = Graph::new();
        let p = g.params(&merged)?;
        let (loss, ratio) = ppo_loss_graph(&mut g, &p, &policy.config, &cb, &old, &adv, &ret, cfg.clip, cfg.value_coef)?;
        last_loss = g.value(loss).item() as f64;
        clipped = g.value(ratio).data().iter().filter(|&&r| (r - 1.0).abs() > cfg.clip).count();
        let grads = g.backward(loss)?.params(&g, &p)?;
        apply_grads(&mut merged, grads, &mut state.adam, 1.0)?;
    }
    let (value_head, params) = merged.split_prefix("value.");
    state.value_head = value_head;
    policy.params = params;
    let stats = PpoStats {
        iter: state.iter,
        loss: last_loss,
        mean_reward: batch.mean_reward(),
        mean_kl,
        clip_frac: clipped as f64 / old.len() as f64,
    };
    state.iter += 1;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainers::TableReward;

    #[test]
    fn gae_matches_hand_computation() {
        let (adv, ret) = gae(&[0.0, 0.0, 1.0], &[0.5, 0.2, 0.1], 1.0, 0.5);
        // deltas: -0.3, -0.1, 0.9
        let a2 = 0.9;
        let a1 = -0.1 + 0.5 * a2;
        let a0 = -0.3 + 0.5 * a1;
        for (x, y) in adv.iter().zip([a0, a1, a2]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((ret[0] - (a0 + 0.5)).abs() < 1e-12);
        // lambda = 1, gamma = 1: advantage is return-to-go minus value
        let (adv, _) = gae(&[1.0, 2.0], &[0.0, 0.0], 1.0, 1.0);
        assert_eq!(adv, vec![3.0, 2.0]);
    }

    fn bandit() -> PolicyModel {
        let cfg = TransformerConfig { vocab_size: 5, d_model: 4, n_layers: 0, n_heads: 1, context_length: 2 };
        let mut m = PolicyModel::new(cfg, 1).unwrap();
        m.freeze_reference();
        m
    }

    #[test]
    fn shaping_is_zero_at_reference() {
        let m = bandit();
        let cfg = PpoConfig { max_tokens: 1, ..PpoConfig::default() };
        let st = PpoState::new(&m, &cfg).unwrap();
        let reward = TableReward(vec![0.1, 0.3, 1.0, 0.2, 0.0]);
        let b = rollout(&m, &st.value_head, &reward, &vec![vec![0]; 16], &cfg, 3).unwrap();
        for s in &b.samples {
            assert_eq!(s.logp, s.ref_logp);
            assert_eq!(s.shaped, vec![s.reward]);
        }
        assert_eq!(b.mean_kl(), 0.0);
    }

    #[test]
    fn shaped_sum_invariant() {
        let mut m = bandit();
        m.params.get_mut("head.b").unwrap().data_mut()[2] += 1.0;
        let cfg = PpoConfig { max_tokens: 1, beta: 0.3, ..PpoConfig::default() };
        let st = PpoState::new(&m, &cfg).unwrap();
        let reward = TableReward(vec![0.1, 0.3, 1.0, 0.2, 0.0]);
        let b = rollout(&m, &st.value_head, &reward, &vec![vec![0]; 8], &cfg, 4).unwrap();
        for s in &b.samples {
            let kl: f64 = s.logp.iter().zip(&s.ref_logp).map(|(a, r)| (*a - *r) as f64).sum();
            let total: f64 = s.shaped.iter().sum();
            assert!((total - (s.reward - 0.3 * kl)).abs() < 1e-12);
        }
    }

    #[test]
    fn needs_reference() {
        let cfg = TransformerConfig { vocab_size: 5, d_model: 4, n_layers: 0, n_heads: 1, context_length: 2 };
        let mut m = PolicyModel::new(cfg, 1).unwrap();
        let pc = PpoConfig { max_tokens: 1, ..PpoConfig::default() };
        let mut st = PpoState::new(&m, &pc).unwrap();
        assert!(ppo_update(&mut m, &mut st, &TableReward(vec![0.0; 5]), &[vec![0]], &pc).is_err());
    }
}
