//! Incremental decoding with a key/value cache. Mirrors the graph forward
//! op-for-op so per-step log-probs agree with `sequence_log_prob`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::TransformerConfig;
use super::vocab::EOS;
use crate::error::{Error, Result};
use crate::nn::{dot, gelu, layer_norm_stats, log_softmax_in_place, softmax_in_place, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f32, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated ids, including the terminating EOS when one was produced.
    pub tokens: Vec<usize>,
    /// Untempered log-prob of each generated token.
    pub step_log_probs: Vec<f64>,
    pub hit_eos: bool,
}

impl Generation {
    pub fn total_log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }

    /// Tokens without the trailing EOS.
    pub fn text_tokens(&self) -> &[usize] {
        if self.hit_eos {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

struct Layer<'a> {
    ln1: (&'a [f32], &'a [f32]),
    qkv: (&'a [f32], &'a [f32]),
    out: (&'a [f32], &'a [f32]),
    ln2: (&'a [f32], &'a [f32]),
    fc: (&'a [f32], &'a [f32]),
    proj: (&'a [f32], &'a [f32]),
}

/// Stateful single-sequence decoder.
pub struct Decoder<'a> {
    cfg: &'a TransformerConfig,
    tok_emb: &'a [f32],
    pos_emb: &'a [f32],
    layers: Vec<Layer<'a>>,
    ln_f: (&'a [f32], &'a [f32]),
    head: (&'a [f32], &'a [f32]),
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    pos: usize,
}

fn pair<'a>(p: &'a ParamSet, a: &str, b: &str) -> Result<(&'a [f32], &'a [f32])> {
    Ok((p.expect(a)?.data(), p.expect(b)?.data()))
}

/// `y = x @ w + b`, accumulating in the same order as the graph matmul.
fn affine(x: &[f32], w: &[f32], b: &[f32], out_dim: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; out_dim];
    for (p, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in y.iter_mut().zip(&w[p * out_dim..(p + 1) * out_dim]) {
            *o += xv * wv;
        }
    }
    for (o, &bv) in y.iter_mut().zip(b) {
        *o += bv;
    }
    y
}

fn layer_norm(x: &[f32], (g, b): (&[f32], &[f32])) -> Vec<f32> {
    let (mean, rstd) = layer_norm_stats(x);
    x.iter().zip(g).zip(b).map(|((&v, &gv), &bv)| (v - mean) * rstd * gv + bv).collect()
}

impl<'a> Decoder<'a> {
    pub fn new(cfg: &'a TransformerConfig, p: &'a ParamSet) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let n = |s: &str| format!("h{l}.{s}");
            layers.push(Layer {
                ln1: pair(p, &n("ln1.g"), &n("ln1.b"))?,
                qkv: pair(p, &n("attn.qkv.w"), &n("attn.qkv.b"))?,
                out: pair(p, &n("attn.out.w"), &n("attn.out.b"))?,
                ln2: pair(p, &n("ln2.g"), &n("ln2.b"))?,
                fc: pair(p, &n("mlp.fc.w"), &n("mlp.fc.b"))?,
                proj: pair(p, &n("mlp.proj.w"), &n("mlp.proj.b"))?,
            });
        }
        Ok(Decoder {
            cfg,
            tok_emb: p.expect("tok_emb")?.data(),
            pos_emb: p.expect("pos_emb")?.data(),
            layers,
            ln_f: pair(p, "ln_f.g", "ln_f.b")?,
            head: pair(p, "head.w", "head.b")?,
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            pos: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f32>> {
        let cfg = self.cfg;
        if self.pos >= cfg.context_length {
            return Err(Error::LengthOverflow { len: self.pos + 1, max: cfg.context_length });
        }
        if token >= cfg.vocab_size {
            return Err(Error::InvalidArgument(format!("token {token} >= vocab {}", cfg.vocab_size)));
        }
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut x: Vec<f32> = self.tok_emb[token * d..(token + 1) * d]
            .iter()
            .zip(&self.pos_emb[self.pos * d..(self.pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let t = self.pos + 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer_norm(&x, layer.ln1);
            let qkv = affine(&h, layer.qkv.0, layer.qkv.1, 3 * d);
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..3 * d]);
            let mut att = vec![0.0f32; d];
            for hd in 0..cfg.n_heads {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                let mut scores: Vec<f32> = (0..t)
                    .map(|j| dot(q, &self.keys[l][j * d + hd * dh..j * d + (hd + 1) * dh]) * scale)
                    .collect();
                softmax_in_place(&mut scores);
                let o = &mut att[hd * dh..(hd + 1) * dh];
                for (j, &w) in scores.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let v = &self.values[l][j * d + hd * dh..j * d + (hd + 1) * dh];
                    for (ov, &vv) in o.iter_mut().zip(v) {
                        *ov += w * vv;
                    }
                }
            }
            let att = affine(&att, layer.out.0, layer.out.1, d);
            for (xv, a) in x.iter_mut().zip(&att) {
                *xv += a;
            }
            let h = layer_norm(&x, layer.ln2);
            let mut h = affine(&h, layer.fc.0, layer.fc.1, cfg.ff_dim());
            for v in h.iter_mut() {
                *v = gelu(*v);
            }
            let h = affine(&h, layer.proj.0, layer.proj.1, d);
            for (xv, a) in x.iter_mut().zip(&h) {
                *xv += a;
            }
        }
        let h = layer_norm(&x, self.ln_f);
        self.pos += 1;
        Ok(affine(&h, self.head.0, self.head.1, cfg.vocab_size))
    }
}

/// Greedy or seeded sampling until EOS or `max_tokens`.
pub fn generate(
    cfg: &TransformerConfig,
    params: &ParamSet,
    prompt: &[usize],
    mode: DecodeMode,
    max_tokens: usize,
) -> Result<Generation> {
    if max_tokens == 0 {
        return Err(Error::InvalidArgument("max_tokens must be >= 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must be non-empty".into()));
    }
    if prompt.len() + max_tokens > cfg.context_length {
        return Err(Error::LengthOverflow { len: prompt.len() + max_tokens, max: cfg.context_length });
    }
    let mut rng = match mode {
        DecodeMode::Sample { temperature, seed } => {
            if !(temperature > 0.0) {
                return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        DecodeMode::Greedy => None,
    };
    let mut dec = Decoder::new(cfg, params)?;
    let mut logits = Vec::new();
    for &t in prompt {
        logits = dec.step(t)?;
    }
    let mut out = Generation { tokens: Vec::new(), step_log_probs: Vec::new(), hit_eos: false };
    loop {
        let mut logp = logits.clone();
        log_softmax_in_place(&mut logp);
        let next = match (mode, rng.as_mut()) {
            (DecodeMode::Sample { temperature, .. }, Some(rng)) => sample_index(&logits, temperature, rng),
            _ => argmax(&logits),
        };
        out.tokens.push(next);
        out.step_log_probs.push(logp[next] as f64);
        if next == EOS {
            out.hit_eos = true;
            break;
        }
        if out.tokens.len() >= max_tokens {
            break;
        }
        logits = dec.step(next)?;
    }
    Ok(out)
}

/// First index of the maximum.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng>(logits: &[f32], temperature: f32, rng: &mut R) -> usize {
    let mut probs: Vec<f32> = logits.iter().map(|&l| l / temperature).collect();
    softmax_in_place(&mut probs);
    let u: f64 = rng.random();
    let mut c = 0.0f64;
    for (i, &p) in probs.iter().enumerate() {
        c += p as f64;
        if u < c {
            return i;
        }
    }
    // rounding left u above the total mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
