//! Supervised fine-tuning on gold answers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::apply_grads;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Graph, ParamVars, Var};
use crate::policy::{token_log_probs, CompletionBatch, PolicyModel, TransformerConfig, Vocab};
use crate::seed;
use crate::stats::StatsRecord;
use crate::taskgen::QAItem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { epochs: 4, batch_size: 8, lr: 3e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub epoch_losses: Vec<f64>,
    pub stats: Vec<StatsRecord>,
}

/// Mean per-token negative log-likelihood of the completions.
pub fn sft_loss_graph(g: &mut Graph, p: &ParamVars, cfg: &TransformerConfig, cb: &CompletionBatch) -> Result<Var> {
    let lp = token_log_probs(g, p, cfg, cb)?;
    let m = g.mean(lp)?;
    g.neg(m)
}

/// Tokenized (prompt, completion) pairs for QA items.
pub(crate) fn encode_items(items: &[QAItem]) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let vocab = Vocab::new();
    items
        .iter()
        .map(|it| Ok((vocab.encode_prompt(&it.question)?, vocab.encode_completion(&it.answer)?)))
        .collect()
}

/// Trains on gold answers. On divergence the model is left at the last
/// good epoch and an error is returned.
pub fn sft_train(model: &mut PolicyModel, items: &[QAItem], cfg: &SftConfig) -> Result<SftReport> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no SFT items".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("epochs, batch size and lr must be positive".into()));
    }
    let data = encode_items(items)?;
    let limit = 10.0 * (model.config.vocab_size as f64).ln();
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(cfg.seed, 0x5f7));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = SftReport { epoch_losses: Vec::new(), stats: Vec::new() };
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        let good = model.params.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let pairs: Vec<(&[usize], &[usize])> = idx.iter().map(|&i| (&data[i].0[..], &data[i].1[..])).collect();
            let cb = CompletionBatch::new(&model.config, &pairs)?;
            let mut g = Graph::new();
            let p = g.params(&model.params)?;
            let step = sft_loss_graph(&mut g, &p, &model.config, &cb)
                .and_then(|loss| Ok((g.value(loss).item() as f64, g.backward(loss)?.params(&g, &p)?)));
            let (lv, grads) = match step {
                Ok(v) => v,
                Err(e @ Error::NumericOverflow { .. }) => {
                    model.params = good;
                    return Err(Error::Divergence { stage: "sft", detail: e.to_string() });
                }
                Err(e) => return Err(e),
            };
            apply_grads(&mut model.params, grads, &mut adam, 1.0)?;
            report.stats.push(StatsRecord::loss("sft", iter, lv));
            total += lv;
            batches += 1;
            iter += 1;
        }
        let mean = total / batches as f64;
        log::info!("sft epoch {epoch}: loss {mean:.4}");
        if !mean.is_finite() || mean > limit {
            model.params = good;
            return Err(Error::Divergence { stage: "sft", detail: format!("epoch {epoch} loss {mean:.4}") });
        }
        report.epoch_losses.push(mean);
    }
    Ok(report)
}
