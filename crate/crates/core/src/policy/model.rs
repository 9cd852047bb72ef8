//! Pre-LayerNorm decoder-only transformer shared by the policy and the
//! reward model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamSet, ParamVars, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_length: usize,
}

impl TransformerConfig {
    /// Desk-scale policy: 64 wide, 2 layers, 2 heads, 256 context.
    pub fn desk(vocab_size: usize) -> Self {
        TransformerConfig { vocab_size, d_model: 64, n_layers: 2, n_heads: 2, context_length: 256 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.context_length == 0 {
            return Err(Error::InvalidArgument("vocab_size and context_length must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// Randomly initialized backbone parameters (embeddings, blocks, final norm).
pub fn init_backbone(cfg: &TransformerConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let std = 0.02;
    let proj_std = 0.02 / ((2 * cfg.n_layers.max(1)) as f32).sqrt();
    let mut p = ParamSet::new();
    p.insert("tok_emb", Tensor::randn(&[cfg.vocab_size, d], std, &mut rng))?;
    p.insert("pos_emb", Tensor::randn(&[cfg.context_length, d], std, &mut rng))?;
    for l in 0..cfg.n_layers {
        let pre = format!("h{l}");
        p.insert(format!("{pre}.ln1.g"), Tensor::full(&[d], 1.0))?;
        p.insert(format!("{pre}.ln1.b"), Tensor::zeros(&[d]))?;
        p.insert(format!("{pre}.attn.qkv.w"), Tensor::randn(&[d, 3 * d], std, &mut rng))?;
        p.insert(format!("{pre}.attn.qkv.b"), Tensor::zeros(&[3 * d]))?;
        p.insert(format!("{pre}.attn.out.w"), Tensor::randn(&[d, d], proj_std, &mut rng))?;
        p.insert(format!("{pre}.attn.out.b"), Tensor::zeros(&[d]))?;
        p.insert(format!("{pre}.ln2.g"), Tensor::full(&[d], 1.0))?;
        p.insert(format!("{pre}.ln2.b"), Tensor::zeros(&[d]))?;
        p.insert(format!("{pre}.mlp.fc.w"), Tensor::randn(&[d, cfg.ff_dim()], std, &mut rng))?;
        p.insert(format!("{pre}.mlp.fc.b"), Tensor::zeros(&[cfg.ff_dim()]))?;
        p.insert(format!("{pre}.mlp.proj.w"), Tensor::randn(&[cfg.ff_dim(), d], proj_std, &mut rng))?;
        p.insert(format!("{pre}.mlp.proj.b"), Tensor::zeros(&[d]))?;
    }
    p.insert("ln_f.g", Tensor::full(&[d], 1.0))?;
    p.insert("ln_f.b", Tensor::zeros(&[d]))?;
    Ok(p)
}

/// Right-padded batch of token sequences laid out as `[batch * seq_len]`.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    pub lens: Vec<usize>,
}

impl SeqBatch {
    pub fn new(seqs: &[Vec<usize>], pad: usize) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidArgument("batch needs non-empty sequences".into()));
        }
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat_n(pad, seq_len - s.len()));
        }
        Ok(SeqBatch { tokens, batch: seqs.len(), seq_len, lens: seqs.iter().map(Vec::len).collect() })
    }

    /// Flat row index of position `pos` in sequence `b`.
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.seq_len + pos
    }
}

/// Final-norm hidden states `[batch * seq_len, d_model]`.
pub fn hidden_states(g: &mut Graph, p: &ParamVars, cfg: &TransformerConfig, batch: &SeqBatch) -> Result<Var> {
    if batch.seq_len > cfg.context_length {
        return Err(Error::LengthOverflow { len: batch.seq_len, max: cfg.context_length });
    }
    let t = batch.seq_len;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let tok = g.embedding(p.get("tok_emb")?, &batch.tokens)?;
    let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..t).collect();
    let pos = g.embedding(p.get("pos_emb")?, &positions)?;
    let mut x = g.add(tok, pos)?;
    let scale = 1.0 / (dh as f32).sqrt();
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("h{l}.{s}");
        let h = g.layer_norm(x, p.get(&name("ln1.g"))?, p.get(&name("ln1.b"))?)?;
        let qkv = g.matmul(h, p.get(&name("attn.qkv.w"))?)?;
        let qkv = g.add_bias(qkv, p.get(&name("attn.qkv.b"))?)?;
        let mut per_seq = Vec::with_capacity(batch.batch);
        for b in 0..batch.batch {
            let rows = g.slice_rows(qkv, b * t, t)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let q = g.slice_cols(rows, hd * dh, dh)?;
                let k = g.slice_cols(rows, d + hd * dh, dh)?;
                let v = g.slice_cols(rows, 2 * d + hd * dh, dh)?;
                let scores = g.matmul_bt(q, k)?;
                let attn = g.causal_softmax(scores, scale)?;
                heads.push(g.matmul(attn, v)?);
            }
            per_seq.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
        }
        let att = if per_seq.len() == 1 { per_seq[0] } else { g.concat_rows(&per_seq)? };
        let att = g.matmul(att, p.get(&name("attn.out.w"))?)?;
        let att = g.add_bias(att, p.get(&name("attn.out.b"))?)?;
        x = g.add(x, att)?;
        let h = g.layer_norm(x, p.get(&name("ln2.g"))?, p.get(&name("ln2.b"))?)?;
        let h = g.matmul(h, p.get(&name("mlp.fc.w"))?)?;
        let h = g.add_bias(h, p.get(&name("mlp.fc.b"))?)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, p.get(&name("mlp.proj.w"))?)?;
        let h = g.add_bias(h, p.get(&name("mlp.proj.b"))?)?;
        x = g.add(x, h)?;
    }
    g.layer_norm(x, p.get("ln_f.g")?, p.get("ln_f.b")?)
}

/// `x @ w + b` for a linear head named `{prefix}.w` / `{prefix}.b`.
pub fn linear_head(g: &mut Graph, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    g.add_bias(y, p.get(&format!("{prefix}.b"))?)
}

/// Sums a `[n]` vector over consecutive segments of the given lengths,
/// giving `[segments.len(), 1]`.
pub fn segment_sums(g: &mut Graph, values: Var, segments: &[usize]) -> Result<Var> {
    let n: usize = segments.iter().sum();
    if g.value(values).len() != n {
        return Err(Error::Shape {
            op: "segment_sums",
            detail: format!("{} values for segments totalling {n}", g.value(values).len()),
        });
    }
    let mut sel = vec![0.0f32; segments.len() * n];
    let mut off = 0;
    for (i, &len) in segments.iter().enumerate() {
        for j in off..off + len {
            sel[i * n + j] = 1.0;
        }
        off += len;
    }
    let sel = g.constant(Tensor::new(vec![segments.len(), n], sel)?)?;
    let col = g.reshape(values, &[n, 1])?;
    g.matmul(sel, col)
}
