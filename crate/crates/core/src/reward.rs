//! Scalar reward model `r(q, a)` trained with the Bradley-Terry loss.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adam_step, clip_grad_norm, log_sigmoid_f64, AdamConfig, AdamState, Graph, ParamSet, ParamVars, Tensor, Var};
use crate::policy::{hidden_states, init_backbone, linear_head, SeqBatch, TransformerConfig, Vocab, PAD};
use crate::prefs::PreferencePair;
use crate::seed;
use crate::stats::StatsRecord;

/// `BOS question SEP answer EOS`; the score reads the hidden state at EOS.
pub fn encode_pair(vocab: &Vocab, question: &str, answer: &str) -> Result<Vec<usize>> {
    let mut ids = vocab.encode_prompt(question)?;
    ids.extend(vocab.encode_completion(answer)?);
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub config: TransformerConfig,
    pub params: ParamSet,
}

impl RewardModel {
    /// Backbone plus a `score` head drawn from N(0, 0.02).
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        let mut params = init_backbone(&config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(seed, 0x5c0e));
        params.insert("score.w", Tensor::randn(&[config.d_model, 1], 0.02, &mut rng))?;
        params.insert("score.b", Tensor::zeros(&[1]))?;
        Ok(RewardModel { config, params })
    }

    /// Default reward config for a policy: same depth and context, twice the width.
    pub fn config_for_policy(policy: &TransformerConfig) -> TransformerConfig {
        TransformerConfig { d_model: policy.d_model * 2, ..policy.clone() }
    }

    pub fn from_params(config: TransformerConfig, params: ParamSet) -> Result<Self> {
        RewardModel::new(config.clone(), 0)?.params.check_same_structure(&params)?;
        Ok(RewardModel { config, params })
    }

    pub fn zero_head(&mut self) {
        for name in ["score.w", "score.b"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn score(&self, question: &str, answer: &str) -> Result<f64> {
        Ok(self.score_batch(&[(question, answer)])?[0])
    }

    pub fn score_batch(&self, items: &[(&str, &str)]) -> Result<Vec<f64>> {
        let vocab = Vocab::new();
        let seqs = items.iter().map(|(q, a)| encode_pair(&vocab, q, a)).collect::<Result<Vec<_>>>()?;
        self.score_tokens(&seqs)
    }

    /// Scores pre-tokenized sequences, 16 at a time.
    pub fn score_tokens(&self, seqs: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(16) {
            let batch = self.batch(chunk)?;
            let mut g = Graph::new();
            let p = g.frozen(&self.params)?;
            let s = reward_scores(&mut g, &p, &self.config, &batch)?;
            out.extend(g.value(s).data().iter().map(|&v| v as f64));
        }
        Ok(out)
    }

    fn batch(&self, seqs: &[Vec<usize>]) -> Result<SeqBatch> {
        if let Some(s) = seqs.iter().find(|s| s.len() > self.config.context_length) {
            return Err(Error::LengthOverflow { len: s.len(), max: self.config.context_length });
        }
        SeqBatch::new(seqs, PAD)
    }
}

/// One score per sequence, `[B, 1]`, read at each sequence's last token.
pub fn reward_scores(g: &mut Graph, p: &ParamVars, cfg: &TransformerConfig, batch: &SeqBatch) -> Result<Var> {
    let h = hidden_states(g, p, cfg, batch)?;
    let rows: Vec<usize> = batch.lens.iter().enumerate().map(|(b, &len)| batch.row(b, len - 1)).collect();
    let last = g.gather_rows(h, &rows)?;
    linear_head(g, p, "score", last)
}

/// Mean of `-log σ(r_acc - r_rej)` over the pairs; accepted sequences come
/// first in `batch`, rejected ones second.
pub fn bt_loss_graph(g: &mut Graph, p: &ParamVars, cfg: &TransformerConfig, batch: &SeqBatch) -> Result<Var> {
    Ok(bt_loss_parts(g, p, cfg, batch)?.0)
}

/// The loss and the `[n, 1]` margins it was computed from.
fn bt_loss_parts(g: &mut Graph, p: &ParamVars, cfg: &TransformerConfig, batch: &SeqBatch) -> Result<(Var, Var)> {
    if !batch.batch.is_multiple_of(2) || batch.batch == 0 {
        return Err(Error::InvalidArgument("bt loss needs accepted and rejected halves".into()));
    }
    let n = batch.batch / 2;
    let s = reward_scores(g, p, cfg, batch)?;
    let acc = g.slice_rows(s, 0, n)?;
    let rej = g.slice_rows(s, n, n)?;
    let margin = g.sub(acc, rej)?;
    let ls = g.log_sigmoid(margin)?;
    let m = g.mean(ls)?;
    Ok((g.neg(m)?, margin))
}

/// Reference value of the loss from scores, in f64.
pub fn bt_loss(scores_acc: &[f64], scores_rej: &[f64]) -> Result<f64> {
    if scores_acc.is_empty() || scores_acc.len() != scores_rej.len() {
        return Err(Error::InvalidArgument("bt loss needs equal, non-empty score lists".into()));
    }
    let sum: f64 = scores_acc.iter().zip(scores_rej).map(|(a, r)| -log_sigmoid_f64(a - r)).sum();
    Ok(sum / scores_acc.len() as f64)
}

/// Fraction of pairs with a strictly higher accepted score.
pub fn pairwise_accuracy(scores_acc: &[f64], scores_rej: &[f64]) -> f64 {
    if scores_acc.is_empty() {
        return 0.0;
    }
    let wins = scores_acc.iter().zip(scores_rej).filter(|(a, r)| a > r).count();
    wins as f64 / scores_acc.len() as f64
}

/// Token sequences for a batch of pairs: accepted first, then rejected.
pub fn pair_batch(pairs: &[&PreferencePair]) -> Result<Vec<Vec<usize>>> {
    let vocab = Vocab::new();
    let mut seqs = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        seqs.push(encode_pair(&vocab, &p.question, &p.accepted)?);
    }
    for p in pairs {
        seqs.push(encode_pair(&vocab, &p.question, &p.rejected)?);
    }
    Ok(seqs)
}

/// Seeded split by question id so all pairs of a question land together.
pub fn split_pairs_by_question(
    pairs: &[PreferencePair],
    heldout_fraction: f64,
    seed: u64,
) -> (Vec<PreferencePair>, Vec<PreferencePair>) {
    let ids: BTreeSet<&str> = pairs.iter().map(|p| p.question_id.as_str()).collect();
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = ((ids.len() as f64 * heldout_fraction).round() as usize).min(ids.len());
    let held: BTreeSet<&str> = ids[..n_held].iter().copied().collect();
    pairs.iter().cloned().partition(|p| !held.contains(p.question_id.as_str()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig { epochs: 1, batch_size: 8, lr: 3e-4, heldout_fraction: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmTrainReport {
    pub epoch_losses: Vec<f64>,
    pub initial_heldout_accuracy: f64,
    pub heldout_accuracy: f64,
    pub heldout_pairs: usize,
    /// Counts of held-out margins `r_acc - r_rej` in unit-wide bins from
    /// -5 to 5; values outside fall into the end bins.
    pub margin_histogram: Vec<usize>,
    pub stats: Vec<StatsRecord>,
}

/// Held-out scores for every pair: (accepted, rejected).
pub fn score_pairs(rm: &RewardModel, pairs: &[PreferencePair]) -> Result<(Vec<f64>, Vec<f64>)> {
    let refs: Vec<&PreferencePair> = pairs.iter().collect();
    let mut acc = Vec::with_capacity(pairs.len());
    let mut rej = Vec::with_capacity(pairs.len());
    for chunk in refs.chunks(8) {
        let s = rm.score_tokens(&pair_batch(chunk)?)?;
        acc.extend_from_slice(&s[..chunk.len()]);
        rej.extend_from_slice(&s[chunk.len()..]);
    }
    Ok((acc, rej))
}

fn margin_histogram(acc: &[f64], rej: &[f64]) -> Vec<usize> {
    let mut h = vec![0usize; 10];
    for (a, r) in acc.iter().zip(rej) {
        let bin = ((a - r) + 5.0).floor().clamp(0.0, 9.0) as usize;
        h[bin] += 1;
    }
    h
}

/// Adam on the Bradley-Terry loss over a 90/10 question-level split.
pub fn train_rm(rm: &mut RewardModel, pairs: &[PreferencePair], cfg: &RmTrainConfig) -> Result<RmTrainReport> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("epochs, batch size and lr must be positive".into()));
    }
    let (train, held) = split_pairs_by_question(pairs, cfg.heldout_fraction, cfg.seed);
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training pairs after the held-out split".into()));
    }
    let (a0, r0) = score_pairs(rm, &held)?;
    let initial_heldout_accuracy = pairwise_accuracy(&a0, &r0);
    let limit = 10.0 * std::f64::consts::LN_2;
    let mut adam = AdamState::new(&rm.params, AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(cfg.seed, 0xb7));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut stats = Vec::new();
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let chunk: Vec<&PreferencePair> = idx.iter().map(|&i| &train[i]).collect();
            let batch = rm.batch(&pair_batch(&chunk)?)?;
            let mut g = Graph::new();
            let p = g.params(&rm.params)?;
            let (loss, margin) = bt_loss_parts(&mut g, &p, &rm.config, &batch)?;
            let lv = g.value(loss).item() as f64;
            let margins = g.value(margin).data();
            let pos = margins.iter().filter(|&&m| m > 0.0).count() as f64 / margins.len() as f64;
            let mut grads = g.backward(loss)?.params(&g, &p)?;
            clip_grad_norm(&mut grads, 1.0);
            adam_step(&mut rm.params, &grads, &mut adam)?;
            let mut rec = StatsRecord::loss("rm", iter, lv);
            rec.margin_pos_frac = Some(pos);
            stats.push(rec);
            total += lv;
            batches += 1;
            iter += 1;
        }
        let mean = total / batches as f64;
        log::info!("rm epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
        if !mean.is_finite() || mean > limit {
            return Err(Error::Divergence { stage: "rm", detail: format!("epoch {epoch} loss {mean:.4} > {limit:.4}") });
        }
    }
    let (a1, r1) = score_pairs(rm, &held)?;
    Ok(RmTrainReport {
        epoch_losses,
        initial_heldout_accuracy,
        heldout_accuracy: pairwise_accuracy(&a1, &r1),
        heldout_pairs: held.len(),
        margin_histogram: margin_histogram(&a1, &r1),
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;

    fn tiny() -> TransformerConfig {
        TransformerConfig { vocab_size: Vocab::new().size(), d_model: 8, n_layers: 1, n_heads: 2, context_length: 64 }
    }

    fn pair(q: &str, a: &str, r: &str) -> PreferencePair {
        PreferencePair { question_id: q.into(), pair_index: 0, question: q.into(), accepted: a.into(), rejected: r.into() }
    }

    #[test]
    fn zero_head_scores_zero() {
        let mut rm = RewardModel::new(tiny(), 1).unwrap();
        rm.zero_head();
        for (q, a) in [("q?", "Answer: 1 m"), ("x", "")] {
            assert_eq!(rm.score(q, a).unwrap(), 0.0);
        }
    }

    #[test]
    fn trailing_padding_is_ignored() {
        let rm = RewardModel::new(tiny(), 2).unwrap();
        let alone = rm.score("How far?", "d = 6").unwrap();
        let batched = rm.score_batch(&[("How far?", "d = 6"), ("A much longer question here?", "a longer answer")]).unwrap();
        assert!((alone - batched[0]).abs() < 1e-6, "{alone} vs {}", batched[0]);
    }

    #[test]
    fn overflow_is_an_error() {
        let rm = RewardModel::new(tiny(), 2).unwrap();
        let long = "a".repeat(80);
        assert!(matches!(rm.score("q", &long), Err(Error::LengthOverflow { .. })));
    }

    #[test]
    fn bt_loss_values() {
        assert!((bt_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let oracle = (1.0 + 5f64.exp()).ln();
        assert!((bt_loss(&[0.0], &[5.0]).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 5.006715348489118).abs() < 1e-12);
        assert!(bt_loss(&[40.0], &[0.0]).unwrap() < 1e-15);
        assert!(bt_loss(&[], &[]).is_err());
    }

    #[test]
    fn swapping_pairs_raises_loss() {
        let acc = [1.0, 0.5, -0.2];
        let rej = [0.0, 0.7, -1.0];
        let l = bt_loss(&acc, &rej).unwrap();
        let swapped = bt_loss(&rej, &acc).unwrap();
        let per_pair: f64 = acc.iter().zip(&rej).map(|(a, r)| -log_sigmoid_f64(r - a)).sum::<f64>() / 3.0;
        assert!((swapped - per_pair).abs() < 1e-12);
        assert!(swapped > l);
    }

    #[test]
    fn graph_loss_matches_reference() {
        let rm = RewardModel::new(tiny(), 3).unwrap();
        let pairs = [pair("q1", "good answer", "bad"), pair("q2", "Answer: 3 m", "Answer: 4 m")];
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let batch = SeqBatch::new(&pair_batch(&refs).unwrap(), PAD).unwrap();
        let mut g = Graph::new();
        let p = g.frozen(&rm.params).unwrap();
        let l = bt_loss_graph(&mut g, &p, &rm.config, &batch).unwrap();
        let (a, r) = score_pairs(&rm, &pairs).unwrap();
        assert!((g.value(l).item() as f64 - bt_loss(&a, &r).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rm = RewardModel::new(TransformerConfig { d_model: 4, context_length: 24, ..tiny() }, 4).unwrap();
        // O(1) weights keep the central difference inside the linear regime
        for (name, t) in rm.params.iter_mut() {
            if !name.contains(".g") {
                t.data_mut().iter_mut().for_each(|v| *v *= 25.0);
            }
        }
        let pairs = [pair("q", "ab", "c"), pair("r", "d", "efg")];
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let batch = SeqBatch::new(&pair_batch(&refs).unwrap(), PAD).unwrap();
        let cfg = rm.config.clone();
        let loss = |g: &mut Graph, p: &ParamVars| bt_loss_graph(g, p, &cfg, &batch);
        let err = finite_diff_check(&loss, &rm.params, 1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn split_keeps_questions_together() {
        let pairs: Vec<_> = (0..30).flat_map(|q| (0..3).map(move |_| pair(&format!("q{q}"), "a", "b"))).collect();
        let (train, held) = split_pairs_by_question(&pairs, 0.1, 7);
        assert_eq!(held.len(), 9);
        assert_eq!(train.len() + held.len(), 90);
        let held_ids: BTreeSet<_> = held.iter().map(|p| &p.question_id).collect();
        assert!(train.iter().all(|p| !held_ids.contains(&p.question_id)));
        assert_eq!(split_pairs_by_question(&pairs, 0.1, 7).1, held);
    }

    proptest::proptest! {
        #[test]
        fn accuracy_ignores_increasing_affine_maps(
            scores in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40),
            scale in 0.01f64..100.0,
            shift in -10.0f64..10.0,
        ) {
            let (a, r): (Vec<f64>, Vec<f64>) = scores.into_iter().unzip();
            let f = |xs: &[f64]| xs.iter().map(|x| scale * x + shift).collect::<Vec<_>>();
            let base = pairwise_accuracy(&a, &r);
            proptest::prop_assert!((0.0..=1.0).contains(&base));
            proptest::prop_assert_eq!(base, pairwise_accuracy(&f(&a), &f(&r)));
        }

        #[test]
        fn bt_loss_is_non_negative(m in proptest::collection::vec(-30.0f64..30.0, 1..20)) {
            let zeros = vec![0.0; m.len()];
            proptest::prop_assert!(bt_loss(&m, &zeros).unwrap() >= 0.0);
        }
    }
}
