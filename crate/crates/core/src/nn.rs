//! Shared network building blocks: affine layer norm, sinusoidal
//! positions, and multi-head attention over tape variables.

use crate::error::{MbcError, Result};
use crate::num::{Graph, ModelRng, ParamStore, Tensor, Var, NEG_INF_MASK};

/// Sinusoidal position encodings, rows 0..len.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            t.set(pos, 2 * i, (pos as f64 * freq).sin());
            t.set(pos, 2 * i + 1, (pos as f64 * freq).cos());
        }
    }
    t
}

/// Layer norm followed by learned per-column gain and bias.
pub fn ln_affine(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm_rows(x);
    let scaled = g.mul_row(n, gain)?;
    g.add_row(scaled, bias)
}

/// Scaled dot-product attention with column-split heads.
///
/// `q`, `k`, `v` are already-projected matrices (s_q x D and s_k x D);
/// `mask` is an additive s_q x s_k matrix (0 or a large negative value).
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let d = g.value(q).cols();
    if d % heads != 0 {
        return Err(MbcError::Config(format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask_var = mask.map(|m| g.constant(m.clone()));
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let scores = match mask_var {
            Some(m) => g.add(scores, m)?,
            None => scores,
        };
        let weights = g.softmax_rows(scores);
        outs.push(g.matmul(weights, vh)?);
    }
    g.concat_cols(&outs)
}

/// Additive causal mask for a query of `s` content rows attending over
/// `prefix` unconditionally visible rows followed by `s` causal rows.
pub fn causal_prefix_mask(s: usize, prefix: usize) -> Tensor {
    let mut m = Tensor::zeros(s, prefix + s);
    for i in 0..s {
        for j in 0..s {
            if j > i {
                m.set(i, prefix + j, NEG_INF_MASK);
            }
        }
    }
    m
}

/// Parameter names used by one attention block under `prefix`.
pub fn attn_block_names(prefix: &str, block: usize) -> [String; 6] {
    [
        format!("{prefix}blk{block}.ln_g"),
        format!("{prefix}blk{block}.ln_b"),
        format!("{prefix}blk{block}.wq"),
        format!("{prefix}blk{block}.wk"),
        format!("{prefix}blk{block}.wv"),
        format!("{prefix}blk{block}.wo"),
    ]
}

/// Insert one attention block's parameters (LN affine + four D x D
/// projections), drawing from the model RNG in a fixed order.
pub fn init_attn_block(
    store: &mut ParamStore,
    prefix: &str,
    block: usize,
    dim: usize,
    rng: &mut ModelRng,
    trainable: bool,
) -> Result<()> {
    let [ln_g, ln_b, wq, wk, wv, wo] = attn_block_names(prefix, block);
    store.insert(&ln_g, Tensor::filled(1, dim, 1.0), trainable)?;
    store.insert(&ln_b, Tensor::zeros(1, dim), trainable)?;
    for name in [wq, wk, wv, wo] {
        store.insert(&name, rng.xavier_tensor(dim, dim), trainable)?;
    }
    Ok(())
}

/// Pre-norm cross-attention block: x + Wo . MHA(q = LN(x) Wq, k = ctx Wk,
/// v = ctx Wv).
pub fn cross_attention_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    block: usize,
    heads: usize,
    x: Var,
    ctx: Var,
) -> Result<Var> {
    let [ln_g, ln_b, wq, wk, wv, wo] = attn_block_names(prefix, block);
    let gain = g.bind(store, &ln_g)?;
    let bias = g.bind(store, &ln_b)?;
    let xn = ln_affine(g, x, gain, bias)?;
    let wq = g.bind(store, &wq)?;
    let wk = g.bind(store, &wk)?;
    let wv = g.bind(store, &wv)?;
    let wo = g.bind(store, &wo)?;
    let q = g.matmul(xn, wq)?;
    let k = g.matmul(ctx, wk)?;
    let v = g.matmul(ctx, wv)?;
    let attn = multi_head_attention(g, q, k, v, heads, None)?;
    let out = g.matmul(attn, wo)?;
    g.add(x, out)
}

/// Pre-norm self-attention block: x + Wo . MHA(LN(x)).
pub fn self_attention_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    block: usize,
    heads: usize,
    x: Var,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let [ln_g, ln_b, wq, wk, wv, wo] = attn_block_names(prefix, block);
    let gain = g.bind(store, &ln_g)?;
    let bias = g.bind(store, &ln_b)?;
    let xn = ln_affine(g, x, gain, bias)?;
    let wq = g.bind(store, &wq)?;
    let wk = g.bind(store, &wk)?;
    let wv = g.bind(store, &wv)?;
    let wo = g.bind(store, &wo)?;
    let q = g.matmul(xn, wq)?;
    let k = g.matmul(xn, wk)?;
    let v = g.matmul(xn, wv)?;
    let attn = multi_head_attention(g, q, k, v, heads, mask)?;
    let out = g.matmul(attn, wo)?;
    g.add(x, out)
}
