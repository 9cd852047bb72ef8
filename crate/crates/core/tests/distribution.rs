//! Sequence probabilities factorize: enumerated mass sums to one, and the
//! sampler draws tokens at the model's probabilities.

use rlhaif_core::policy::{DecodeMode, PolicyModel, TransformerConfig, EOS};

const VOCAB: usize = 5;
const MAX_LEN: usize = 3;

fn model(seed: u64) -> PolicyModel {
    scaled(seed, 40.0)
}

fn scaled(seed: u64, k: f32) -> PolicyModel {
    let cfg = TransformerConfig { vocab_size: VOCAB, d_model: 8, n_layers: 2, n_heads: 2, context_length: 1 + MAX_LEN };
    let mut m = PolicyModel::new(cfg, seed).unwrap();
    // sharpen the init so the distribution is far from uniform
    for (_, t) in m.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= k);
    }
    m
}

/// Every completion of at most `MAX_LEN` tokens: EOS-terminated ones of any
/// length plus the unterminated ones cut at `MAX_LEN`.
fn completions() -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for depth in 1..=MAX_LEN {
        let mut next = Vec::new();
        for prefix in &frontier {
            for t in 0..VOCAB {
                let mut s = prefix.clone();
                s.push(t);
                if t == EOS || depth == MAX_LEN {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

/// Total probability of every completion under a sharpened random model.
pub fn enumerated_mass(seed: u64) -> f64 {
    let m = model(seed);
    completions().iter().map(|c| m.sequence_log_prob(&[0], c).unwrap().exp()).sum()
}

#[test]
fn enumerated_mass_sums_to_one() {
    // 1 + 4 + 16 terminated early, 4^2 * 5 at full length
    assert_eq!(completions().len(), 1 + 4 + 4 * 4 * 5);
    for seed in 0..20 {
        let mass = enumerated_mass(seed);
        assert!((mass - 1.0).abs() < 1e-5, "seed {seed}: mass {mass}");
    }
}

#[test]
fn decoder_and_teacher_forcing_agree() {
    let m = model(3);
    for seed in 0..50 {
        let gen = m.generate(&[0], DecodeMode::Sample { temperature: 1.0, seed }, MAX_LEN).unwrap();
        let tf = m.sequence_log_prob(&[0], &gen.tokens).unwrap();
        assert!((gen.total_log_prob() - tf).abs() < 1e-4, "{} vs {tf}", gen.total_log_prob());
    }
}

#[test]
fn sampling_frequencies_match_probabilities() {
    let m = model(5);
    let probs: Vec<f64> = m.next_token_log_probs(&[0]).unwrap().iter().map(|&l| (l as f64).exp()).collect();
    let n = 40_000usize;
    let mut counts = [0usize; VOCAB];
    for seed in 0..n as u64 {
        let gen = m.generate(&[0], DecodeMode::Sample { temperature: 1.0, seed }, 1).unwrap();
        counts[gen.tokens[0]] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let f = *c as f64 / n as f64;
        // five standard errors
        let tol = 5.0 * (p * (1.0 - p) / n as f64).sqrt() + 1e-9;
        assert!((f - p).abs() <= tol, "freq {f} vs prob {p}");
    }
}

#[test]
fn temperature_sharpens() {
    let m = scaled(5, 10.0);
    let probs = m.next_token_log_probs(&[0]).unwrap();
    let best = rlhaif_core::policy::argmax(&probs);
    let n = 4000u64;
    let hits = |t: f32| {
        (0..n)
            .filter(|&s| m.generate(&[0], DecodeMode::Sample { temperature: t, seed: s }, 1).unwrap().tokens[0] == best)
            .count()
    };
    assert!(hits(0.3) > hits(1.0));
}
