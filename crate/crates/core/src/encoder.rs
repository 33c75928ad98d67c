//! Amortization network (documents -> fixed T x D latents) and input
//! encoder (queries -> variable-length representations).

use serde::{Deserialize, Serialize};

use crate::error::{MbcError, Result};
use crate::nn::{attn_block_names, init_attn_block, ln_affine, self_attention_block, sinusoidal_positions};
use crate::num::{Graph, ModelRng, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub max_sequence_length: usize,
    pub output_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 512,
            embed_dim: 64,
            num_blocks: 2,
            num_heads: 4,
            max_sequence_length: 64,
            output_tokens: 12,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(MbcError::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.output_tokens == 0 {
            return Err(MbcError::Config("output_tokens must be >= 1".into()));
        }
        if self.max_sequence_length == 0 {
            return Err(MbcError::Config("max_sequence_length must be >= 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(MbcError::Config("vocab_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A document's latent encoding plus its identifier.
#[derive(Clone, Debug)]
pub struct ContextVector {
    pub values: Tensor,
    pub doc_id: String,
}

/// Encoded query representation, T_q x D.
#[derive(Clone, Debug)]
pub struct QueryRep {
    pub values: Tensor,
}

/// Initialize an encoder's parameters under `prefix`. The document
/// encoder carries a learned pooling map; the query encoder does not.
pub fn init_encoder(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut ModelRng,
    with_pooling: bool,
) -> Result<()> {
    cfg.validate()?;
    store.insert(
        &format!("{prefix}embed"),
        rng.normal_tensor(cfg.vocab_size, cfg.embed_dim, 0.02),
        true,
    )?;
    for b in 0..cfg.num_blocks {
        init_attn_block(store, prefix, b, cfg.embed_dim, rng, true)?;
    }
    store.insert(&format!("{prefix}final_ln_g"), Tensor::filled(1, cfg.embed_dim, 1.0), true)?;
    store.insert(&format!("{prefix}final_ln_b"), Tensor::zeros(1, cfg.embed_dim), true)?;
    if with_pooling {
        store.insert(
            &format!("{prefix}pool"),
            rng.normal_tensor(cfg.output_tokens, cfg.max_sequence_length, 0.02),
            true,
        )?;
    }
    Ok(())
}

fn validate_tokens(tokens: &[usize], cfg: &EncoderConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(MbcError::InvalidArgument("encoder input is empty".into()));
    }
    if tokens.len() > cfg.max_sequence_length {
        return Err(MbcError::InvalidArgument(format!(
            "encoder input length {} exceeds max {}",
            tokens.len(),
            cfg.max_sequence_length
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(MbcError::InvalidArgument(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn embed_with_positions(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    tokens: &[usize],
) -> Result<Var> {
    let table = g.bind(store, &format!("{prefix}embed"))?;
    let emb = g.embed(table, tokens)?;
    let pos = g.constant(sinusoidal_positions(tokens.len(), cfg.embed_dim));
    g.add(emb, pos)
}

fn block_stack(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    mut x: Var,
) -> Result<Var> {
    for b in 0..cfg.num_blocks {
        x = self_attention_block(g, store, prefix, b, cfg.num_heads, x, None)?;
    }
    let gain = g.bind(store, &format!("{prefix}final_ln_g"))?;
    let bias = g.bind(store, &format!("{prefix}final_ln_b"))?;
    ln_affine(g, x, gain, bias)
}

/// g_amort: tokens -> T x D latent via learned pooling over the final
/// hidden states. With zero blocks the pooling acts directly on the raw
/// embeddings (degenerate path used by tests).
pub fn encode_document(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    tokens: &[usize],
) -> Result<Var> {
    validate_tokens(tokens, cfg)?;
    let x = embed_with_positions(g, store, prefix, cfg, tokens)?;
    let h = if cfg.num_blocks == 0 { x } else { block_stack(g, store, prefix, cfg, x)? };
    let pool = g.bind(store, &format!("{prefix}pool"))?;
    let pool_slice = g.slice_cols(pool, 0, tokens.len())?;
    let weights = g.softmax_rows(pool_slice);
    g.matmul(weights, h)
}

/// g_input: tokens -> T_q x D representation, no pooling.
pub fn encode_query(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(MbcError::InvalidArgument("encoder input is empty".into()));
    }
    let tokens = &tokens[..tokens.len().min(cfg.max_sequence_length)];
    validate_tokens(tokens, cfg)?;
    let x = embed_with_positions(g, store, prefix, cfg, tokens)?;
    if cfg.num_blocks == 0 {
        return Ok(x);
    }
    block_stack(g, store, prefix, cfg, x)
}

/// Forward-only document encoding on a throwaway tape.
pub fn encode_document_value(
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    tokens: &[usize],
    doc_id: &str,
) -> Result<ContextVector> {
    let mut g = Graph::new();
    let out = encode_document(&mut g, store, prefix, cfg, tokens)?;
    Ok(ContextVector { values: g.value(out).clone(), doc_id: doc_id.to_string() })
}

pub fn encode_query_value(
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    tokens: &[usize],
) -> Result<QueryRep> {
    let mut g = Graph::new();
    let out = encode_query(&mut g, store, prefix, cfg, tokens)?;
    Ok(QueryRep { values: g.value(out).clone() })
}

pub fn encoder_param_names(prefix: &str, cfg: &EncoderConfig, with_pooling: bool) -> Vec<String> {
    let mut names = vec![format!("{prefix}embed")];
    for b in 0..cfg.num_blocks {
        names.extend(attn_block_names(prefix, b));
    }
    names.push(format!("{prefix}final_ln_g"));
    names.push(format!("{prefix}final_ln_b"));
    if with_pooling {
        names.push(format!("{prefix}pool"));
    }
    names
}
