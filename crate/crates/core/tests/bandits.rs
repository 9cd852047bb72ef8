//! One-step bandit oracles for PPO and ReMax, where every quantity can be
//! enumerated exactly.

use rlhaif_core::nn::{Graph, ParamSet};
use rlhaif_core::policy::{token_log_probs, CompletionBatch, PolicyModel, TransformerConfig};
use rlhaif_core::trainers::{
    exact_kl, ppo_update, remax_gradient, Baseline, PpoConfig, PpoState, RemaxConfig, TableReward,
};

const REWARDS: [f64; 5] = [0.1, 0.3, 1.0, 0.2, 0.0];
const BEST: usize = 2;

fn bandit(seed: u64) -> PolicyModel {
    let cfg = TransformerConfig { vocab_size: 5, d_model: 4, n_layers: 0, n_heads: 1, context_length: 2 };
    let mut m = PolicyModel::new(cfg, seed).unwrap();
    m.freeze_reference();
    m
}

fn probs(m: &PolicyModel) -> Vec<f64> {
    m.next_token_log_probs(&[0]).unwrap().iter().map(|&l| (l as f64).exp()).collect()
}

/// Raw advantages: batch whitening drops their scale, which moves the fixed
/// point away from the KL-regularized optimum.
fn ppo_config(beta: f64, seed: u64) -> PpoConfig {
    PpoConfig {
        beta,
        max_tokens: 1,
        lr: 1e-2,
        rollouts_per_update: 16,
        whiten_advantages: false,
        seed,
        ..PpoConfig::default()
    }
}

fn train_ppo(beta: f64, iters: usize, seed: u64) -> PolicyModel {
    let mut m = bandit(1);
    let cfg = ppo_config(beta, seed);
    let mut st = PpoState::new(&m, &cfg).unwrap();
    let prompts = vec![vec![0]; cfg.rollouts_per_update];
    for _ in 0..iters {
        ppo_update(&mut m, &mut st, &TableReward(REWARDS.to_vec()), &prompts, &cfg).unwrap();
    }
    m
}

/// Probability of the best arm after 200 updates at beta 0.1.
pub fn ppo_best_arm_prob(seed: u64) -> f64 {
    probs(&train_ppo(0.1, 200, seed))[BEST]
}

/// Exact final KL to the reference, averaged over three rollout seeds.
pub fn ppo_mean_final_kl(beta: f64) -> f64 {
    (0..3).map(|s| exact_kl(&train_ppo(beta, 200, s), &[0]).unwrap()).sum::<f64>() / 3.0
}

#[test]
fn ppo_finds_the_argmax() {
    for seed in 0..3 {
        let p = ppo_best_arm_prob(seed);
        assert!(p >= 0.95, "{p}");
    }
}

#[test]
fn ppo_kl_shrinks_with_beta() {
    let kls: Vec<f64> = [0.02, 0.1, 0.5].iter().map(|&b| ppo_mean_final_kl(b)).collect();
    assert!(kls.windows(2).all(|w| w[1] <= w[0]), "{kls:?}");
}

/// Exact gradient of `-E_pi[r - beta log(pi/pi_ref)]`, holding the shaped
/// reward fixed at the current policy (the quantity ReMax estimates).
fn exact_gradient(m: &PolicyModel, beta: f64) -> ParamSet {
    let lp = m.next_token_log_probs(&[0]).unwrap();
    let lr = m.reference_model().unwrap().next_token_log_probs(&[0]).unwrap();
    let shaped: Vec<f32> = (0..5).map(|a| (REWARDS[a] - beta * (lp[a] - lr[a]) as f64) as f32).collect();
    let prompt = [0usize];
    let toks: Vec<[usize; 1]> = (0..5).map(|a| [a]).collect();
    let pairs: Vec<(&[usize], &[usize])> = toks.iter().map(|t| (&prompt[..], &t[..])).collect();
    let cb = CompletionBatch::new(&m.config, &pairs).unwrap();
    let mut g = Graph::new();
    let p = g.params(&m.params).unwrap();
    let logp = token_log_probs(&mut g, &p, &m.config, &cb).unwrap();
    let pi = g.exp(logp).unwrap();
    let r = g.constant(rlhaif_core::nn::Tensor::from_vec(shaped)).unwrap();
    let e = g.mul(pi, r).unwrap();
    let j = g.sum(e).unwrap();
    let loss = g.neg(j).unwrap();
    g.backward(loss).unwrap().params(&g, &p).unwrap()
}

struct Moments {
    sum: Vec<f64>,
    sq: Vec<f64>,
    n: usize,
}

impl Moments {
    fn new(k: usize) -> Self {
        Moments { sum: vec![0.0; k], sq: vec![0.0; k], n: 0 }
    }

    fn push(&mut self, g: &ParamSet) {
        for (i, v) in g.iter().flat_map(|(_, t)| t.data().iter()).enumerate() {
            self.sum[i] += *v as f64;
            self.sq[i] += (*v as f64) * (*v as f64);
        }
        self.n += 1;
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    fn total_variance(&self) -> f64 {
        let n = self.n as f64;
        self.sum.iter().zip(&self.sq).map(|(s, q)| (q - s * s / n) / (n - 1.0)).sum()
    }
}

/// A policy away from uniform and away from its reference.
fn skewed() -> PolicyModel {
    let mut m = bandit(4);
    let b = m.params.get_mut("head.b").unwrap().data_mut();
    b.copy_from_slice(&[0.4, -0.3, 0.2, 0.9, -0.6]);
    m
}

pub struct RemaxCheck {
    /// Largest |Monte-Carlo mean - exact| over gradient coordinates.
    pub max_deviation: f64,
    pub remax_variance: f64,
    pub reinforce_variance: f64,
}

/// ReMax and plain REINFORCE gradients on the same `n` rollout seeds.
pub fn remax_check(n: u64) -> RemaxCheck {
    let m = skewed();
    let beta = 0.1;
    let exact = exact_gradient(&m, beta);
    let exact: Vec<f64> = exact.iter().flat_map(|(_, t)| t.data().iter().map(|&v| v as f64)).collect();
    let k = exact.len();
    let mut remax = Moments::new(k);
    let mut reinforce = Moments::new(k);
    let prompts = vec![vec![0]];
    let cfg = RemaxConfig { beta, max_tokens: 1, ..RemaxConfig::default() };
    let plain = RemaxConfig { baseline: Baseline::None, ..cfg.clone() };
    let reward = TableReward(REWARDS.to_vec());
    for seed in 0..n {
        remax.push(&remax_gradient(&m, &reward, &prompts, &cfg, seed).unwrap().0);
        reinforce.push(&remax_gradient(&m, &reward, &prompts, &plain, seed).unwrap().0);
    }
    RemaxCheck {
        max_deviation: remax.mean().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        remax_variance: remax.total_variance(),
        reinforce_variance: reinforce.total_variance(),
    }
}

#[test]
fn remax_is_unbiased_with_lower_variance() {
    let c = remax_check(100_000);
    assert!(c.max_deviation < 1e-2, "max coordinate deviation {}", c.max_deviation);
    assert!(c.remax_variance < c.reinforce_variance, "{} vs {}", c.remax_variance, c.reinforce_variance);
}
