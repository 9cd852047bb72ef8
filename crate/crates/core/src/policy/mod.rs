//! Character-level autoregressive policy.

pub mod checkpoint;
mod infer;
pub mod model;
pub mod vocab;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use infer::{argmax, generate, DecodeMode, Decoder, Generation};
pub use model::{hidden_states, init_backbone, linear_head, segment_sums, SeqBatch, TransformerConfig};
pub use vocab::{Vocab, BOS, EOS, PAD, SEP};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamSet, ParamVars, Tensor, Var};

/// Prompt/completion pairs flattened for teacher-forced scoring.
///
/// Each pair is fed as `prompt ++ completion` minus its last token; row
/// `target_rows[i]` predicts `targets[i]`.
#[derive(Debug, Clone)]
pub struct CompletionBatch {
    pub seqs: SeqBatch,
    pub target_rows: Vec<usize>,
    pub targets: Vec<usize>,
    /// Number of completion tokens per pair.
    pub segments: Vec<usize>,
}

impl CompletionBatch {
    pub fn new(cfg: &TransformerConfig, pairs: &[(&[usize], &[usize])]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(pairs.len());
        for (prompt, completion) in pairs {
            if prompt.is_empty() {
                return Err(Error::InvalidArgument("prompt must contain at least one token".into()));
            }
            let total = prompt.len() + completion.len();
            if total > cfg.context_length {
                return Err(Error::LengthOverflow { len: total, max: cfg.context_length });
            }
            if let Some(&bad) = prompt.iter().chain(completion.iter()).find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::InvalidArgument(format!("token {bad} >= vocab {}", cfg.vocab_size)));
            }
            let mut full: Vec<usize> = prompt.to_vec();
            full.extend_from_slice(completion);
            full.truncate((total - 1).max(1));
            inputs.push(full);
        }
        let seqs = SeqBatch::new(&inputs, PAD.min(cfg.vocab_size - 1))?;
        let mut target_rows = Vec::new();
        let mut targets = Vec::new();
        let mut segments = Vec::with_capacity(pairs.len());
        for (b, (prompt, completion)) in pairs.iter().enumerate() {
            for (i, &tok) in completion.iter().enumerate() {
                target_rows.push(seqs.row(b, prompt.len() - 1 + i));
                targets.push(tok);
            }
            segments.push(completion.len());
        }
        Ok(CompletionBatch { seqs, target_rows, targets, segments })
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }
}

/// Hidden states at the rows that predict completion tokens, `[N, d]`.
pub fn completion_hidden(g: &mut Graph, p: &ParamVars, cfg: &TransformerConfig, cb: &CompletionBatch) -> Result<Var> {
    let h = hidden_states(g, p, cfg, &cb.seqs)?;
    g.gather_rows(h, &cb.target_rows)
}

/// Log-prob of every completion token, `[N]`.
pub fn token_log_probs_from_hidden(g: &mut Graph, p: &ParamVars, cb: &CompletionBatch, hidden: Var) -> Result<Var> {
    let logits = linear_head(g, p, "head", hidden)?;
    let logp = g.log_softmax(logits)?;
    g.pick_cols(logp, &cb.targets)
}

pub fn token_log_probs(g: &mut Graph, p: &ParamVars, cfg: &TransformerConfig, cb: &CompletionBatch) -> Result<Var> {
    let h = completion_hidden(g, p, cfg, cb)?;
    token_log_probs_from_hidden(g, p, cb, h)
}

/// Per-pair completion log-prob without gradients, summed in f64.
pub fn batch_sequence_log_probs(
    cfg: &TransformerConfig,
    params: &ParamSet,
    pairs: &[(&[usize], &[usize])],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(16) {
        let cb = CompletionBatch::new(cfg, chunk)?;
        let per_token = batch_token_log_probs(cfg, params, &cb)?;
        let mut off = 0;
        for &len in &cb.segments {
            out.push(per_token[off..off + len].iter().map(|&v| v as f64).sum());
            off += len;
        }
    }
    Ok(out)
}

/// Per-token completion log-probs without gradients.
pub fn batch_token_log_probs(cfg: &TransformerConfig, params: &ParamSet, cb: &CompletionBatch) -> Result<Vec<f32>> {
    if cb.num_targets() == 0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let vars = g.frozen(params)?;
    let lp = token_log_probs(&mut g, &vars, cfg, cb)?;
    Ok(g.value(lp).data().to_vec())
}

/// π_θ, with an optional frozen copy serving as π_ref.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub config: TransformerConfig,
    pub params: ParamSet,
    reference: Option<Arc<ParamSet>>,
}

impl PolicyModel {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        let mut params = init_backbone(&config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_4ead);
        params.insert("head.w", Tensor::randn(&[config.d_model, config.vocab_size], 0.02, &mut rng))?;
        params.insert("head.b", Tensor::zeros(&[config.vocab_size]))?;
        Ok(PolicyModel { config, params, reference: None })
    }

    pub fn from_params(config: TransformerConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = PolicyModel::new(config.clone(), 0)?;
        expected.params.check_same_structure(&params)?;
        Ok(PolicyModel { config, params, reference: None })
    }

    /// Snapshots the current parameters as π_ref. Later updates to `params`
    /// never touch the snapshot.
    pub fn freeze_reference(&mut self) {
        self.reference = Some(Arc::new(self.params.clone()));
    }

    pub fn set_reference(&mut self, reference: Arc<ParamSet>) -> Result<()> {
        self.params.check_same_structure(&reference)?;
        self.reference = Some(reference);
        Ok(())
    }

    pub fn reference(&self) -> Result<&ParamSet> {
        self.reference
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("policy has no frozen reference".into()))
    }

    pub fn reference_arc(&self) -> Option<Arc<ParamSet>> {
        self.reference.clone()
    }

    /// The frozen reference as a standalone model.
    pub fn reference_model(&self) -> Result<PolicyModel> {
        Ok(PolicyModel { config: self.config.clone(), params: self.reference()?.clone(), reference: None })
    }

    /// `Σ_t log π_θ(a_t | q, a_<t)` including any EOS in `completion`.
    pub fn sequence_log_prob(&self, prompt: &[usize], completion: &[usize]) -> Result<f64> {
        Ok(batch_sequence_log_probs(&self.config, &self.params, &[(prompt, completion)])?[0])
    }

    pub fn generate(&self, prompt: &[usize], mode: DecodeMode, max_tokens: usize) -> Result<Generation> {
        generate(&self.config, &self.params, prompt, mode, max_tokens)
    }

    /// Next-token distribution after `prefix`.
    pub fn next_token_log_probs(&self, prefix: &[usize]) -> Result<Vec<f32>> {
        let mut dec = Decoder::new(&self.config, &self.params)?;
        let mut logits = Vec::new();
        for &t in prefix {
            logits = dec.step(t)?;
        }
        crate::nn::log_softmax_in_place(&mut logits);
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> TransformerConfig {
        TransformerConfig { vocab_size: vocab, d_model: 8, n_layers: 1, n_heads: 2, context_length: 16 }
    }

    fn zero_head(m: &mut PolicyModel) {
        for name in ["head.w", "head.b"] {
            for v in m.params.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn uniform_model_log_prob() {
        let mut m = PolicyModel::new(tiny(7), 1).unwrap();
        zero_head(&mut m);
        let lp = m.sequence_log_prob(&[0, 3], &[4, 5, 1]).unwrap();
        assert!((lp + 3.0 * (7f64).ln()).abs() < 1e-5, "{lp}");
    }

    #[test]
    fn log_prob_never_positive() {
        let m = PolicyModel::new(tiny(6), 2).unwrap();
        for c in [&[1usize][..], &[2, 3, 4], &[5, 5, 5, 1]] {
            assert!(m.sequence_log_prob(&[0], c).unwrap() <= 0.0);
        }
    }

    #[test]
    fn overflow_is_rejected() {
        let m = PolicyModel::new(tiny(6), 2).unwrap();
        let long = vec![4usize; 16];
        assert!(matches!(m.sequence_log_prob(&[0], &long), Err(Error::LengthOverflow { .. })));
    }

    #[test]
    fn greedy_stops_on_forced_eos() {
        let mut m = PolicyModel::new(tiny(6), 3).unwrap();
        zero_head(&mut m);
        m.params.get_mut("head.b").unwrap().data_mut()[EOS] = 5.0;
        let g = m.generate(&[0], DecodeMode::Greedy, 10).unwrap();
        assert_eq!(g.tokens, vec![EOS]);
        assert!(g.hit_eos);
        assert!(g.text_tokens().is_empty());
    }

    #[test]
    fn greedy_ties_pick_lowest_id() {
        let mut m = PolicyModel::new(tiny(6), 3).unwrap();
        zero_head(&mut m);
        let g = m.generate(&[2], DecodeMode::Greedy, 3).unwrap();
        assert_eq!(g.tokens, vec![0, 0, 0]);
    }

    #[test]
    fn sampling_is_seeded() {
        let m = PolicyModel::new(tiny(6), 4).unwrap();
        let mode = DecodeMode::Sample { temperature: 1.0, seed: 11 };
        let a = m.generate(&[0], mode, 12).unwrap();
        let b = m.generate(&[0], mode, 12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_log_probs_match_teacher_forcing() {
        let m = PolicyModel::new(tiny(9), 5).unwrap();
        let prompt = [0usize, 4, 5];
        let g = m.generate(&prompt, DecodeMode::Greedy, 8).unwrap();
        let lp = m.sequence_log_prob(&prompt, &g.tokens).unwrap();
        assert!((lp - g.total_log_prob()).abs() < 1e-5, "{lp} vs {}", g.total_log_prob());
    }

    #[test]
    fn reference_is_a_frozen_copy() {
        let mut m = PolicyModel::new(tiny(6), 6).unwrap();
        assert!(m.reference().is_err());
        m.freeze_reference();
        let before = m.reference().unwrap().clone();
        m.params.get_mut("head.b").unwrap().data_mut()[0] += 1.0;
        assert_eq!(m.reference().unwrap(), &before);
        assert_ne!(m.params, before);
    }
}
