//! Finite-difference checks of every trainable loss on small random models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlhaif_core::nn::{finite_diff_check, Graph, ParamSet, ParamVars, Tensor};
use rlhaif_core::policy::{batch_token_log_probs, CompletionBatch, PolicyModel, SeqBatch, TransformerConfig, Vocab, PAD};
use rlhaif_core::prefs::PreferencePair;
use rlhaif_core::reward::{bt_loss_graph, pair_batch, RewardModel};
use rlhaif_core::trainers::{dpo_graph, ppo_loss_graph, remax_loss_graph, sft_loss_graph, DpoBatch};

/// Largest allowed step: with a five-point stencil the truncation error is
/// negligible here, while f32 rounding in the loss shrinks with the step.
const EPS: f32 = 1e-2;
const TOL: f64 = 1e-3;

/// Text is drawn from `ALPHABET`, whose ids all fall below `VOCAB`, so the
/// embedding and output tables can be cut to that prefix of the vocabulary.
const ALPHABET: &str = "abc0123";
const VOCAB: usize = 17;

fn config() -> TransformerConfig {
    TransformerConfig { vocab_size: VOCAB, d_model: 8, n_layers: 1, n_heads: 2, context_length: 16 }
}

/// Scale weights to O(1) so the central difference probes real curvature.
fn spread(params: &mut ParamSet) {
    for (name, t) in params.iter_mut() {
        if !name.contains(".g") {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
    }
}

fn text(rng: &mut ChaCha8Rng, max: usize) -> String {
    let chars: Vec<char> = ALPHABET.chars().collect();
    let n = rng.random_range(1..=max);
    (0..n).map(|_| chars[rng.random_range(0..chars.len())]).collect()
}

fn pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let v = Vocab::new();
    (0..n)
        .map(|_| (v.encode_prompt(&text(rng, 6)).unwrap(), v.encode_completion(&text(rng, 6)).unwrap()))
        .collect()
}

fn prefs(rng: &mut ChaCha8Rng, n: usize) -> Vec<PreferencePair> {
    (0..n)
        .map(|i| PreferencePair {
            question_id: format!("q{i}"),
            pair_index: 0,
            question: text(rng, 6),
            accepted: text(rng, 6),
            rejected: text(rng, 6),
        })
        .collect()
}

fn policy(seed: u64) -> PolicyModel {
    let mut m = PolicyModel::new(config(), seed).unwrap();
    spread(&mut m.params);
    m
}

fn batch(p: &[(Vec<usize>, Vec<usize>)]) -> CompletionBatch {
    let refs: Vec<(&[usize], &[usize])> = p.iter().map(|(a, b)| (&a[..], &b[..])).collect();
    CompletionBatch::new(&config(), &refs).unwrap()
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect()
}

pub fn sft_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = policy(seed);
    let cb = batch(&pairs(&mut rng, 2));
    let cfg = config();
    finite_diff_check(&|g: &mut Graph, p: &ParamVars| sft_loss_graph(g, p, &cfg, &cb), &m.params, EPS).unwrap()
}

pub fn bt_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rm = RewardModel::new(config(), seed).unwrap();
    spread(&mut rm.params);
    let data = prefs(&mut rng, 2);
    let refs: Vec<&PreferencePair> = data.iter().collect();
    let b = SeqBatch::new(&pair_batch(&refs).unwrap(), PAD).unwrap();
    let cfg = rm.config.clone();
    finite_diff_check(&|g: &mut Graph, p: &ParamVars| bt_loss_graph(g, p, &cfg, &b), &rm.params, EPS).unwrap()
}

pub fn ppo_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = policy(seed);
    let mut head = ParamSet::new();
    head.insert("value.w", Tensor::new(vec![config().d_model, 1], normal(&mut rng, config().d_model)).unwrap()).unwrap();
    head.insert("value.b", Tensor::new(vec![1], normal(&mut rng, 1)).unwrap()).unwrap();
    let params = m.params.merged(&head).unwrap();
    let cb = batch(&pairs(&mut rng, 2));
    let cfg = config();
    let lp = batch_token_log_probs(&cfg, &m.params, &cb).unwrap();
    // old log-probs put ratios on both sides of the clip range, away from its kinks
    let old: Vec<f32> = lp
        .iter()
        .map(|&l| loop {
            let d: f32 = rng.random_range(-0.4..0.4);
            let r = d.exp();
            if (r - 0.8).abs() > 0.1 && (r - 1.2).abs() > 0.1 {
                break l - d;
            }
        })
        .collect();
    let adv = normal(&mut rng, lp.len());
    let ret = normal(&mut rng, lp.len());
    let loss = |g: &mut Graph, p: &ParamVars| Ok(ppo_loss_graph(g, p, &cfg, &cb, &old, &adv, &ret, 0.2, 0.5)?.0);
    finite_diff_check(&loss, &params, EPS).unwrap()
}

pub fn dpo_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = policy(seed);
    let reference = policy(seed ^ 0xd90);
    let data = prefs(&mut rng, 2);
    let refs: Vec<&PreferencePair> = data.iter().collect();
    let cfg = config();
    let b = DpoBatch::new(&cfg, &reference.params, &refs).unwrap();
    let loss = |g: &mut Graph, p: &ParamVars| Ok(dpo_graph(g, p, &cfg, &b, 0.1)?.0);
    finite_diff_check(&loss, &m.params, EPS).unwrap()
}

pub fn remax_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = policy(seed);
    let cb = batch(&pairs(&mut rng, 3));
    let adv: Vec<f64> = normal(&mut rng, 3).into_iter().map(f64::from).collect();
    let cfg = config();
    finite_diff_check(&|g: &mut Graph, p: &ParamVars| remax_loss_graph(g, p, &cfg, &cb, &adv), &m.params, EPS).unwrap()
}

fn check(name: &str, f: fn(u64) -> f64) {
    let worst = (0..10).map(f).fold(0.0, f64::max);
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn sft_cross_entropy() {
    check("sft", sft_error);
}

#[test]
fn bradley_terry() {
    check("bt", bt_error);
}

#[test]
fn ppo_surrogate_and_value() {
    check("ppo", ppo_error);
}

#[test]
fn dpo() {
    check("dpo", dpo_error);
}

#[test]
fn remax_surrogate() {
    check("remax", remax_error);
}


#[test]
fn alphabet_fits_the_cut_vocabulary() {
    let v = Vocab::new();
    assert!(ALPHABET.chars().all(|c| v.id(c).is_some_and(|id| id < VOCAB)));
}
