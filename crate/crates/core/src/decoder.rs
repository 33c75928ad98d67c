//! Answer decoder: a frozen base transformer whose attention reads the
//! aggregated memory summary as a key/value prefix, with trainable
//! low-rank adapters on the key/value projections of the last few layers.

use serde::{Deserialize, Serialize};

use crate::corpus::{BOS_ID, EOA_ID};
use crate::error::{MbcError, Result};
use crate::nn::{attn_block_names, causal_prefix_mask, init_attn_block, ln_affine,
    multi_head_attention, sinusoidal_positions};
use crate::num::{Graph, ModelRng, ParamStore, Tensor, Var};

pub const BASE_PREFIX: &str = "base.";
pub const LORA_PREFIX: &str = "lora.";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Adapters go on the last `lora_layers` layers.
    pub lora_layers: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    /// Share one down-projection between the key and value adapters.
    pub share_down: bool,
    pub max_sequence_length: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            vocab_size: 512,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            lora_layers: 2,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_dropout: 0.05,
            share_down: true,
            max_sequence_length: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 || self.embed_dim == 0 || self.num_layers == 0 {
            return Err(MbcError::Config("decoder needs vocab >= 4, dim and layers >= 1".into()));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(MbcError::Config(format!(
                "decoder dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.lora_layers > self.num_layers {
            return Err(MbcError::Config(format!(
                "{} adapter layers exceed {} decoder layers",
                self.lora_layers, self.num_layers
            )));
        }
        if self.lora_layers > 0 && self.lora_rank == 0 {
            return Err(MbcError::Config("adapter rank must be >= 1".into()));
        }
        if self.lora_alpha <= 0.0 || !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(MbcError::Config(format!(
                "adapter needs alpha > 0 and dropout in [0,1), got {} and {}",
                self.lora_alpha, self.lora_dropout
            )));
        }
        if self.max_sequence_length < 4 {
            return Err(MbcError::Config("decoder max sequence length must be >= 4".into()));
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    fn first_lora_layer(&self) -> usize {
        self.num_layers - self.lora_layers
    }

    fn layer_has_lora(&self, layer: usize) -> bool {
        layer >= self.first_lora_layer()
    }

    /// Closed-form trainable adapter size: 3rD per layer with a shared
    /// down-projection, 4rD otherwise.
    pub fn lora_param_count(&self) -> usize {
        let per_layer = if self.share_down { 3 } else { 4 };
        self.lora_layers * per_layer * self.lora_rank * self.embed_dim
    }
}

/// Frozen base weights (embedding, attention layers, final norm; the
/// output head is tied to the embedding) plus trainable adapters. Up
/// projections start at zero so adapters begin as an exact no-op.
pub fn init_decoder(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut ModelRng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    // The embedding doubles as the tied output head behind a final layer
    // norm, which bounds the hidden norm to sqrt(d); rows need enough norm
    // that logit separation can exceed log(vocab).
    store.insert(
        &format!("{BASE_PREFIX}embed"),
        rng.normal_tensor(cfg.vocab_size, d, 2.0 / (d as f64).sqrt()),
        false,
    )?;
    for l in 0..cfg.num_layers {
        init_attn_block(store, BASE_PREFIX, l, d, rng, false)?;
    }
    store.insert(&format!("{BASE_PREFIX}final_ln_g"), Tensor::filled(1, d, 1.0), false)?;
    store.insert(&format!("{BASE_PREFIX}final_ln_b"), Tensor::zeros(1, d), false)?;
    for l in cfg.first_lora_layer()..cfg.num_layers {
        let r = cfg.lora_rank;
        if cfg.share_down {
            store.insert(&format!("{LORA_PREFIX}blk{l}.a"), rng.normal_tensor(d, r, 0.02), true)?;
        } else {
            store.insert(&format!("{LORA_PREFIX}blk{l}.a_k"), rng.normal_tensor(d, r, 0.02), true)?;
            store.insert(&format!("{LORA_PREFIX}blk{l}.a_v"), rng.normal_tensor(d, r, 0.02), true)?;
        }
        store.insert(&format!("{LORA_PREFIX}blk{l}.b_k"), Tensor::zeros(r, d), true)?;
        store.insert(&format!("{LORA_PREFIX}blk{l}.b_v"), Tensor::zeros(r, d), true)?;
    }
    Ok(())
}

/// Whether the adapter dropout draws fresh masks (training) or is off
/// (evaluation and generation).
pub enum DropoutMode<'a> {
    Disabled,
    Enabled(&'a mut ModelRng),
}

/// Inverted-dropout mask values (0 or 1/(1-rho)); logged so replays reuse
/// the recorded mask. A fully-zero draw is resampled so the adapter path
/// never silently disappears from a training step.
fn dropout_mask(
    g: &mut Graph,
    mode: &mut DropoutMode,
    rows: usize,
    cols: usize,
    rho: f64,
) -> Option<Tensor> {
    if rho == 0.0 {
        return None;
    }
    let rng = match mode {
        DropoutMode::Disabled => return None,
        DropoutMode::Enabled(rng) => rng,
    };
    let keep = 1.0 / (1.0 - rho);
    let vals = g.logged_values(|| loop {
        let draw: Vec<f64> =
            (0..rows * cols).map(|_| if rng.bernoulli(rho) { 0.0 } else { keep }).collect();
        if draw.iter().any(|&v| v != 0.0) {
            return draw;
        }
    });
    Some(Tensor::new(rows, cols, vals).expect("mask size"))
}

/// Content-row projection with an optional low-rank residual:
/// xn W + scale * drop(xn A) B.
pub fn lora_projection(
    g: &mut Graph,
    xn: Var,
    w: Var,
    adapter: Option<(Var, Var, f64, Option<&Tensor>)>,
) -> Result<Var> {
    let base = g.matmul(xn, w)?;
    let Some((a, b, scale, mask)) = adapter else {
        return Ok(base);
    };
    let mut down = g.matmul(xn, a)?;
    if let Some(m) = mask {
        let m = g.constant(m.clone());
        down = g.mul(down, m)?;
    }
    let up = g.matmul(down, b)?;
    let delta = g.scale(up, scale);
    g.add(base, delta)
}

fn decoder_layer(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &DecoderConfig,
    layer: usize,
    x: Var,
    memory: Option<Var>,
    mask: &Tensor,
    mode: &mut DropoutMode,
) -> Result<Var> {
    let [ln_g, ln_b, wq, wk, wv, wo] = attn_block_names(BASE_PREFIX, layer);
    let gain = g.bind(store, &ln_g)?;
    let bias = g.bind(store, &ln_b)?;
    let xn = ln_affine(g, x, gain, bias)?;
    let wq = g.bind(store, &wq)?;
    let wk = g.bind(store, &wk)?;
    let wv = g.bind(store, &wv)?;
    let wo = g.bind(store, &wo)?;
    let q = g.matmul(xn, wq)?;

    let s = g.value(xn).rows();
    let r = cfg.lora_rank;
    let adapter = |g: &mut Graph,
                   up_name: &str,
                   mode: &mut DropoutMode|
     -> Result<(Var, Var, Option<Tensor>)> {
        let down_name = if cfg.share_down {
            format!("{LORA_PREFIX}blk{layer}.a")
        } else {
            format!("{LORA_PREFIX}blk{layer}.a_{}", &up_name[up_name.len() - 1..])
        };
        let a = g.bind(store, &down_name)?;
        let b = g.bind(store, up_name)?;
        let mask = dropout_mask(g, mode, s, r, cfg.lora_dropout);
        Ok((a, b, mask))
    };

    let (k_content, v_content) = if cfg.layer_has_lora(layer) {
        let (a_k, b_k, m_k) = adapter(g, &format!("{LORA_PREFIX}blk{layer}.b_k"), mode)?;
        let k = lora_projection(g, xn, wk, Some((a_k, b_k, cfg.lora_scale(), m_k.as_ref())))?;
        let (a_v, b_v, m_v) = adapter(g, &format!("{LORA_PREFIX}blk{layer}.b_v"), mode)?;
        let v = lora_projection(g, xn, wv, Some((a_v, b_v, cfg.lora_scale(), m_v.as_ref())))?;
        (k, v)
    } else {
        (g.matmul(xn, wk)?, g.matmul(xn, wv)?)
    };

    // the memory prefix feeds keys and values untouched by the adapters
    let (k, v) = match memory {
        Some(mem) => {
            let k_pre = g.matmul(mem, wk)?;
            let v_pre = g.matmul(mem, wv)?;
            (g.concat_rows(&[k_pre, k_content])?, g.concat_rows(&[v_pre, v_content])?)
        }
        None => (k_content, v_content),
    };
    let attn = multi_head_attention(g, q, k, v, cfg.num_heads, Some(mask))?;
    let out = g.matmul(attn, wo)?;
    g.add(x, out)
}

/// Causal decoding of `tokens` conditioned on an optional memory summary
/// prefix. Returns per-position logits (tied output head).
pub fn forward_modulated(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &DecoderConfig,
    memory: Option<Var>,
    tokens: &[usize],
    mode: &mut DropoutMode,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(MbcError::InvalidArgument("decoder input is empty".into()));
    }
    if tokens.len() > cfg.max_sequence_length {
        return Err(MbcError::InvalidArgument(format!(
            "decoder input of {} tokens exceeds maximum {}",
            tokens.len(),
            cfg.max_sequence_length
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(MbcError::InvalidArgument(format!(
            "token id {bad} out of vocabulary ({})",
            cfg.vocab_size
        )));
    }
    let prefix = match memory {
        Some(m) => {
            let (r, c) = g.value(m).shape();
            if c != cfg.embed_dim || r == 0 {
                return Err(MbcError::Shape(format!(
                    "memory summary is {r}x{c}, decoder dim is {}",
                    cfg.embed_dim
                )));
            }
            r
        }
        None => 0,
    };
    let embed = g.bind(store, &format!("{BASE_PREFIX}embed"))?;
    let tok = g.embed(embed, tokens)?;
    let pos = g.constant(sinusoidal_positions(tokens.len(), cfg.embed_dim));
    let mut x = g.add(tok, pos)?;
    let mask = causal_prefix_mask(tokens.len(), prefix);
    for l in 0..cfg.num_layers {
        x = decoder_layer(g, store, cfg, l, x, memory, &mask, mode)?;
    }
    let gain = g.bind(store, &format!("{BASE_PREFIX}final_ln_g"))?;
    let bias = g.bind(store, &format!("{BASE_PREFIX}final_ln_b"))?;
    let h = ln_affine(g, x, gain, bias)?;
    g.matmul_nt(h, embed)
}

/// Teacher-forced answer loss: the sequence is BOS, question, answer, EOA
/// and the cross entropy is averaged over the answer and EOA positions.
pub fn qa_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &DecoderConfig,
    memory: Option<Var>,
    question: &[usize],
    answer: &[usize],
    mode: &mut DropoutMode,
) -> Result<Var> {
    if answer.is_empty() {
        return Err(MbcError::InvalidArgument("answer is empty".into()));
    }
    let mut full = Vec::with_capacity(question.len() + answer.len() + 2);
    full.push(BOS_ID);
    full.extend_from_slice(question);
    full.extend_from_slice(answer);
    full.push(EOA_ID);
    if full.len() > cfg.max_sequence_length + 1 {
        return Err(MbcError::InvalidArgument(format!(
            "question + answer of {} tokens exceeds decoder window {}",
            full.len(),
            cfg.max_sequence_length
        )));
    }
    let input = &full[..full.len() - 1];
    let targets = &full[1..];
    let mask: Vec<bool> = (0..targets.len()).map(|i| i >= question.len()).collect();
    let logits = forward_modulated(g, store, cfg, memory, input, mode)?;
    g.cross_entropy(logits, targets, &mask)
}

/// Greedy decoding: argmax at each step (ties to the lowest id), stopping
/// at EOA or when the window is full. Returns answer token ids only.
pub fn greedy_generate(
    store: &ParamStore,
    cfg: &DecoderConfig,
    memory: Option<&Tensor>,
    question: &[usize],
    max_new_tokens: usize,
) -> Result<Vec<usize>> {
    let mut seq = Vec::with_capacity(question.len() + 1 + max_new_tokens);
    seq.push(BOS_ID);
    seq.extend_from_slice(question);
    let mut out = Vec::new();
    for _ in 0..max_new_tokens {
        if seq.len() >= cfg.max_sequence_length {
            break;
        }
        let mut g = Graph::new();
        let mem = match memory {
            Some(m) => Some(g.leaf(m.clone(), false)),
            None => None,
        };
        let logits = forward_modulated(&mut g, store, cfg, mem, &seq, &mut DropoutMode::Disabled)?;
        let row = g.value(logits).row(seq.len() - 1);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == EOA_ID {
            break;
        }
        out.push(best);
        seq.push(best);
    }
    Ok(out)
}
