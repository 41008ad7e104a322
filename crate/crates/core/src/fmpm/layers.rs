//! Parameterized building blocks: linear maps, affine layer norm, pre-norm
//! multi-head attention and feed-forward blocks.

use ami_tensor::{AttentionMask, Graph, ParamSet, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub(crate) fn init_linear<R: Rng + ?Sized>(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
    if bias {
        p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }
}

pub(crate) fn init_layer_norm(p: &mut ParamSet, name: &str, dim: usize) {
    p.insert(format!("{name}.g"), Tensor::ones(&[dim]));
    p.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

pub(crate) fn init_attention<R: Rng + ?Sized>(p: &mut ParamSet, name: &str, d: usize, rng: &mut R) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(p, &format!("{name}.{proj}"), d, d, false, rng);
    }
}

pub(crate) fn init_block<R: Rng + ?Sized>(p: &mut ParamSet, name: &str, d: usize, ff: usize, rng: &mut R) {
    init_layer_norm(p, &format!("{name}.ln1"), d);
    init_attention(p, &format!("{name}.att"), d, rng);
    init_layer_norm(p, &format!("{name}.ln2"), d);
    init_linear(p, &format!("{name}.ff1"), d, ff, true, rng);
    init_linear(p, &format!("{name}.ff2"), ff, d, true, rng);
}

/// `x · W (+ b)` over the last axis.
pub(crate) fn linear(g: &mut Graph, p: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let y = g.matmul(x, w)?;
    let bias = format!("{name}.b");
    if p.contains(&bias) {
        let b = g.param(p, &bias)?;
        Ok(g.add(y, b)?)
    } else {
        Ok(y)
    }
}

pub(crate) fn layer_norm(g: &mut Graph, p: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let gain = g.param(p, &format!("{name}.g"))?;
    let bias = g.param(p, &format!("{name}.b"))?;
    let y = g.mul(n, gain)?;
    Ok(g.add(y, bias)?)
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[b, l, heads, d / heads])?;
    Ok(g.permute(r, &[0, 2, 1, 3])?)
}

/// Multi-head attention of `queries` `[B, Lq, D]` over `keys` `[B, Lk, D]`.
/// Inputs are expected to be normalized already.
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    p: &ParamSet,
    name: &str,
    queries: Var,
    keys: Var,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let q = linear(g, p, &format!("{name}.q"), queries)?;
    let k = linear(g, p, &format!("{name}.k"), keys)?;
    let v = linear(g, p, &format!("{name}.v"), keys)?;
    let (q, k, v) = (split_heads(g, q, heads)?, split_heads(g, k, heads)?, split_heads(g, v, heads)?);
    let att = g.scaled_dot_product_attention(q, k, v, mask)?;
    let merged = g.permute(att.output, &[0, 2, 1, 3])?;
    let s = g.shape(queries).to_vec();
    let merged = g.reshape(merged, &s)?;
    linear(g, p, &format!("{name}.o"), merged)
}

/// Runtime knobs shared by every block in one forward pass.
pub(crate) struct BlockCtx<'a, R: Rng + ?Sized> {
    pub heads: usize,
    pub dropout: f64,
    pub rng: Option<&'a mut R>,
}

impl<R: Rng + ?Sized> BlockCtx<'_, R> {
    pub fn drop(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => Ok(g.dropout(x, self.dropout, rng)?),
            _ => Ok(x),
        }
    }
}

/// Pre-norm transformer block: `x + Att(LN(x))`, then `+ FF(LN(·))`.
pub(crate) fn transformer_block<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &ParamSet,
    name: &str,
    x: Var,
    mask: Option<&AttentionMask>,
    ctx: &mut BlockCtx<'_, R>,
) -> Result<Var> {
    let n = layer_norm(g, p, &format!("{name}.ln1"), x)?;
    let a = multi_head_attention(g, p, &format!("{name}.att"), n, n, ctx.heads, mask)?;
    let a = ctx.drop(g, a)?;
    let x = g.add(x, a)?;
    let n = layer_norm(g, p, &format!("{name}.ln2"), x)?;
    let h = linear(g, p, &format!("{name}.ff1"), n)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{name}.ff2"), h)?;
    let h = ctx.drop(g, h)?;
    Ok(g.add(x, h)?)
}

/// Fixed sinusoidal position table `[len, d]`.
pub fn sinusoidal_encoding(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}
