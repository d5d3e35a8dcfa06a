//! Pre-norm transformer building blocks over a bound [`ParamStore`].

use crate::error::Result;
use crate::numerics::{Bound, Graph, ParamStore, Rng, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

pub fn init_linear(p: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    p.init_glorot(&format!("{prefix}.w"), fan_in, fan_out, rng);
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_layernorm(p: &mut ParamStore, prefix: &str, width: usize) {
    p.insert(format!("{prefix}.gain"), Tensor::ones(&[width]));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[width]));
}

pub fn init_block(p: &mut ParamStore, prefix: &str, dims: BlockDims, rng: &mut Rng) {
    let d = dims.width;
    init_layernorm(p, &format!("{prefix}.ln1"), d);
    for proj in ["wq", "wk", "wv", "wo"] {
        init_linear(p, &format!("{prefix}.attn.{proj}"), d, d, rng);
    }
    init_layernorm(p, &format!("{prefix}.ln2"), d);
    init_linear(p, &format!("{prefix}.mlp.fc1"), d, d * dims.mlp_ratio, rng);
    init_linear(p, &format!("{prefix}.mlp.fc2"), d * dims.mlp_ratio, d, rng);
}

/// `x @ w + b` over the last axis of any-rank `x`.
pub fn linear(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{prefix}.w"))?;
    let bias = b.var(&format!("{prefix}.b"))?;
    let shape = g.shape(x).to_vec();
    let fan_in = *shape.last().expect("rank >= 1");
    let rows = g.value(x).numel() / fan_in;
    let flat = g.reshape(x, &[rows, fan_in])?;
    let y = g.matmul(flat, w)?;
    let y = g.add_row(y, bias)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank >= 1") = g.shape(w)[1];
    g.reshape(y, &out_shape)
}

pub fn layernorm(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = b.var(&format!("{prefix}.gain"))?;
    let bias = b.var(&format!("{prefix}.bias"))?;
    g.layernorm(x, gain, bias, LN_EPS)
}

/// `[B, N, D]` → `[B·H, N, D/H]`.
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (bsz, n, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[bsz, n, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[bsz * heads, n, d / heads])
}

fn merge_heads(g: &mut Graph, x: Var, bsz: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, dh) = (s[1], s[2]);
    let x = g.reshape(x, &[bsz, heads, n, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[bsz, n, heads * dh])
}

/// Multi-head self-attention. `score_bias`, when given, is added to the
/// `[B·H, N, N]` attention logits (large negatives hide keys).
pub fn attention(
    g: &mut Graph,
    b: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    score_bias: Option<&Tensor>,
) -> Result<Var> {
    let bsz = g.shape(x)[0];
    let d = g.shape(x)[2];
    let q = linear(g, b, &format!("{prefix}.wq"), x)?;
    let k = linear(g, b, &format!("{prefix}.wk"), x)?;
    let v = linear(g, b, &format!("{prefix}.wv"), x)?;
    let (q, k, v) = (
        split_heads(g, q, heads)?,
        split_heads(g, k, heads)?,
        split_heads(g, v, heads)?,
    );
    let scores = g.bmm(q, k, true)?;
    let mut scores = g.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
    if let Some(bias) = score_bias {
        scores = g.add_const(scores, bias)?;
    }
    let probs = g.softmax(scores)?;
    let ctx = g.bmm(probs, v, false)?;
    let ctx = merge_heads(g, ctx, bsz, heads)?;
    linear(g, b, &format!("{prefix}.wo"), ctx)
}

pub fn mlp(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, b, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, b, &format!("{prefix}.fc2"), h)
}

/// `x + attn(ln1(x))`, then `+ mlp(ln2(·))`.
pub fn block(g: &mut Graph, b: &Bound, prefix: &str, x: Var, heads: usize, score_bias: Option<&Tensor>) -> Result<Var> {
    let h = layernorm(g, b, &format!("{prefix}.ln1"), x)?;
    let h = attention(g, b, &format!("{prefix}.attn"), h, heads, score_bias)?;
    let x = g.add(x, h)?;
    let h = layernorm(g, b, &format!("{prefix}.ln2"), x)?;
    let h = mlp(g, b, &format!("{prefix}.mlp"), h)?;
    g.add(x, h)
}

/// Adds a `[N, D]` table to every item of a `[B, N, D]` batch.
pub fn add_positions(g: &mut Graph, x: Var, table: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    let t = g.reshape(table, &[s[1] * s[2]])?;
    let y = g.add_row(flat, t)?;
    g.reshape(y, &s)
}
