//! Monte-Carlo and exact KL between the policy and its reference.

use crate::error::{Error, Result};
use crate::policy::{batch_token_log_probs, CompletionBatch, DecodeMode, PolicyModel};
use crate::seed;

/// Mean over sampled tokens of `log pi - log pi_ref`, sampling `n_samples`
/// completions per prompt from the policy.
pub fn kl_report(policy: &PolicyModel, prompts: &[Vec<usize>], n_samples: usize, max_tokens: usize, seed: u64) -> Result<f64> {
    if n_samples == 0 || prompts.is_empty() {
        return Err(Error::InvalidArgument("kl_report needs prompts and n_samples >= 1".into()));
    }
    let reference = policy.reference()?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut pending: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut flush = |pending: &mut Vec<(usize, Vec<usize>)>| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let pairs: Vec<(&[usize], &[usize])> = pending.iter().map(|(p, c)| (&prompts[*p][..], &c[..])).collect();
        let cb = CompletionBatch::new(&policy.config, &pairs)?;
        let lp = batch_token_log_probs(&policy.config, &policy.params, &cb)?;
        let rp = batch_token_log_probs(&policy.config, reference, &cb)?;
        total += lp.iter().zip(&rp).map(|(a, b)| (a - b) as f64).sum::<f64>();
        count += lp.len();
        pending.clear();
        Ok(())
    };
    for (pi, prompt) in prompts.iter().enumerate() {
        let room = policy.config.context_length.saturating_sub(prompt.len());
        for s in 0..n_samples {
            let mode = DecodeMode::Sample { temperature: 1.0, seed: seed::mix(seed, (pi * n_samples + s) as u64) };
            pending.push((pi, policy.generate(prompt, mode, max_tokens.min(room))?.tokens));
            if pending.len() == 256 {
                flush(&mut pending)?;
            }
        }
    }
    flush(&mut pending)?;
    Ok(total / count as f64)
}

/// Exact next-token KL(pi || pi_ref) after `prefix`.
pub fn exact_kl(policy: &PolicyModel, prefix: &[usize]) -> Result<f64> {
    let p = policy.next_token_log_probs(prefix)?;
    let q = policy.reference_model()?.next_token_log_probs(prefix)?;
    Ok(p.iter().zip(&q).map(|(&lp, &lq)| (lp as f64).exp() * (lp as f64 - lq as f64)).sum())
}
