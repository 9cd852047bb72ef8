//! Direct preference optimization against a frozen reference policy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_grads, mean};
use crate::error::{Error, Result};
use crate::nn::{log_sigmoid_f64, AdamConfig, AdamState, Graph, ParamSet, ParamVars, Tensor, Var};
use crate::policy::{segment_sums, token_log_probs, CompletionBatch, PolicyModel, TransformerConfig, Vocab};
use crate::prefs::PreferencePair;
use crate::seed;
use crate::stats::StatsRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for DpoConfig {
    /// beta, lr and batch size match the PPO defaults.
    fn default() -> Self {
        let ppo = super::PpoConfig::default();
        DpoConfig { beta: ppo.beta, epochs: 1, batch_size: ppo.rollouts_per_update, lr: ppo.lr, seed: ppo.seed }
    }
}

/// `beta * ((lp_acc - ref_acc) - (lp_rej - ref_rej))`
pub fn implicit_margin(beta: f64, lp_acc: f64, ref_acc: f64, lp_rej: f64, ref_rej: f64) -> f64 {
    beta * ((lp_acc - ref_acc) - (lp_rej - ref_rej))
}

/// Pairs laid out as accepted completions then rejected completions, with
/// the reference log-probs of each precomputed.
#[derive(Debug, Clone)]
pub struct DpoBatch {
    pub cb: CompletionBatch,
    pub n: usize,
    pub ref_logps: Vec<f32>,
}

fn encode(pairs: &[&PreferencePair]) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let vocab = Vocab::new();
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        out.push((vocab.encode_prompt(&p.question)?, vocab.encode_completion(&p.accepted)?));
    }
    for p in pairs {
        out.push((vocab.encode_prompt(&p.question)?, vocab.encode_completion(&p.rejected)?));
    }
    Ok(out)
}

fn sequence_log_probs(g: &mut Graph, p: &ParamVars, cfg: &TransformerConfig, cb: &CompletionBatch) -> Result<Var> {
    let lp = token_log_probs(g, p, cfg, cb)?;
    segment_sums(g, lp, &cb.segments)
}

fn sequence_log_prob_values(cfg: &TransformerConfig, params: &ParamSet, cb: &CompletionBatch) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let p = g.frozen(params)?;
    let s = sequence_log_probs(&mut g, &p, cfg, cb)?;
    Ok(g.value(s).data().to_vec())
}

impl DpoBatch {
    pub fn new(cfg: &TransformerConfig, reference: &ParamSet, pairs: &[&PreferencePair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("empty DPO batch".into()));
        }
        let enc = encode(pairs)?;
        let refs: Vec<(&[usize], &[usize])> = enc.iter().map(|(p, c)| (&p[..], &c[..])).collect();
        let cb = CompletionBatch::new(cfg, &refs)?;
        let ref_logps = sequence_log_prob_values(cfg, reference, &cb)?;
        Ok(DpoBatch { cb, n: pairs.len(), ref_logps })
    }
}

/// Returns (loss, margins `[n, 1]`).
pub fn dpo_graph(g: &mut Graph, p: &ParamVars, cfg: &TransformerConfig, batch: &DpoBatch, beta: f64) -> Result<(Var, Var)> {
    let n = batch.n;
    let lp = sequence_log_probs(g, p, cfg, &batch.cb)?;
    let reference = g.constant(Tensor::new(vec![2 * n, 1], batch.ref_logps.clone())?)?;
    let ratio = g.sub(lp, reference)?;
    let acc = g.slice_rows(ratio, 0, n)?;
    let rej = g.slice_rows(ratio, n, n)?;
    let diff = g.sub(acc, rej)?;
    let margin = g.scale(diff, beta as f32)?;
    let ls = g.log_sigmoid(margin)?;
    let m = g.mean(ls)?;
    Ok((g.neg(m)?, margin))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoEval {
    /// Mean loss computed in f64 from the margins.
    pub loss: f64,
    pub margins: Vec<f64>,
}

impl DpoEval {
    pub fn positive_fraction(&self) -> f64 {
        if self.margins.is_empty() {
            return 0.0;
        }
        self.margins.iter().filter(|&&m| m > 0.0).count() as f64 / self.margins.len() as f64
    }
}

/// Loss and implicit-reward margins of `policy` against its frozen reference.
pub fn dpo_loss(policy: &PolicyModel, pairs: &[PreferencePair], beta: f64) -> Result<DpoEval> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("dpo loss needs pairs".into()));
    }
    let reference = policy.reference()?;
    let refs: Vec<&PreferencePair> = pairs.iter().collect();
    let mut margins = Vec::with_capacity(pairs.len());
    for chunk in refs.chunks(8) {
        let batch = DpoBatch::new(&policy.config, reference, chunk)?;
        let mut g = Graph::new();
        let p = g.frozen(&policy.params)?;
        let (_, m) = dpo_graph(&mut g, &p, &policy.config, &batch, beta)?;
        margins.extend(g.value(m).data().iter().map(|&v| v as f64));
    }
    let loss = mean(&margins.iter().map(|&m| -log_sigmoid_f64(m)).collect::<Vec<_>>());
    Ok(DpoEval { loss, margins })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub epoch_losses: Vec<f64>,
    /// Fraction of training pairs with a positive margin, before training
    /// and after each epoch.
    pub margin_pos_frac: Vec<f64>,
    /// Margins after the last epoch.
    pub final_margins: Vec<f64>,
    pub stats: Vec<StatsRecord>,
}

/// Adam on the DPO loss. The policy must carry a frozen reference.
pub fn dpo_train(policy: &mut PolicyModel, pairs: &[PreferencePair], cfg: &DpoConfig) -> Result<DpoReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no preference pairs".into()));
    }
    if !(cfg.beta > 0.0) || cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("dpo needs beta > 0 and positive epochs, batch size, lr".into()));
    }
    let reference = policy.reference()?.clone();
    // reference log-probs are fixed, so compute them once per pair
    let refs: Vec<&PreferencePair> = pairs.iter().collect();
    let mut ref_lp: Vec<(f32, f32)> = Vec::with_capacity(pairs.len());
    for chunk in refs.chunks(8) {
        let b = DpoBatch::new(&policy.config, &reference, chunk)?;
        ref_lp.extend((0..b.n).map(|i| (b.ref_logps[i], b.ref_logps[b.n + i])));
    }
    let encoded: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = {
        let vocab = Vocab::new();
        pairs
            .iter()
            .map(|p| {
                Ok((vocab.encode_prompt(&p.question)?, vocab.encode_completion(&p.accepted)?, vocab.encode_completion(&p.rejected)?))
            })
            .collect::<Result<_>>()?
    };
    let initial = dpo_loss(policy, pairs, cfg.beta)?;
    let mut report = DpoReport {
        epoch_losses: Vec::new(),
        margin_pos_frac: vec![initial.positive_fraction()],
        final_margins: initial.margins,
        stats: Vec::new(),
    };
    let limit = 10.0 * std::f64::consts::LN_2;
    let mut adam = AdamState::new(&policy.params, AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(cfg.seed, 0xd90));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        let good = policy.params.clone();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for idx in order.chunks(cfg.batch_size) {
            let mut seqs: Vec<(&[usize], &[usize])> = idx.iter().map(|&i| (&encoded[i].0[..], &encoded[i].1[..])).collect();
            seqs.extend(idx.iter().map(|&i| (&encoded[i].0[..], &encoded[i].2[..])));
            let mut ref_logps: Vec<f32> = idx.iter().map(|&i| ref_lp[i].0).collect();
            ref_logps.extend(idx.iter().map(|&i| ref_lp[i].1));
            let batch = DpoBatch { cb: CompletionBatch::new(&policy.config, &seqs)?, n: idx.len(), ref_logps };
            let mut g = Graph::new();
            let p = g.params(&policy.params)?;
            let (loss, margin) = dpo_graph(&mut g, &p, &policy.config, &batch, cfg.beta)?;
            let lv = g.value(loss).item() as f64;
            let m = g.value(margin).data();
            let pos = m.iter().filter(|&&x| x > 0.0).count() as f64 / m.len() as f64;
            let grads = g.backward(loss)?.params(&g, &p)?;
            apply_grads(&mut policy.params, grads, &mut adam, 1.0)?;
            let mut rec = StatsRecord::loss("dpo", iter, lv);
            rec.margin_pos_frac = Some(pos);
            report.stats.push(rec);
            losses.push(lv);
            iter += 1;
        }
        let epoch_loss = mean(&losses);
        if !epoch_loss.is_finite() || epoch_loss > limit {
            policy.params = good;
            return Err(Error::Divergence { stage: "dpo", detail: format!("epoch {epoch} loss {epoch_loss:.4}") });
        }
        let eval = dpo_loss(policy, pairs, cfg.beta)?;
        log::info!("dpo epoch {epoch}: loss {epoch_loss:.4}, positive margins {:.3}", eval.positive_fraction());
        report.epoch_losses.push(epoch_loss);
        report.margin_pos_frac.push(eval.positive_fraction());
        report.final_margins = eval.margins;
    }
    Ok(report)
}
