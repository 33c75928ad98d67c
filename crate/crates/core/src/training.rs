//! End-to-end optimization: batched encode / quantize / aggregate /
//! decode steps, usage tracking with dead-code resets, backprop dropout
//! over batch documents, warmup scheduling, per-epoch validation, and
//! bit-reproducible checkpointing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::{answer, exact_match, mean_token_f1, memorize, new_bank};
use crate::aggregator::aggregate;
use crate::bytes::{write_blob, write_f64s, write_string, ByteReader};
use crate::codebook::{quantize_ste, vq_loss, Codebook};
use crate::config::RunConfig;
use crate::corpus::{Document, QARecord, Vocabulary};
use crate::decoder::{qa_loss, DropoutMode};
use crate::encoder::{encode_document, encode_query};
use crate::error::{MbcError, Result};
use crate::model::{Model, AMORT_PREFIX, CODEBOOK_ENTRIES, INPUT_PREFIX};
use crate::num::{AdamHyper, AdamOptimizer, AdamState, Graph, ModelRng, ParamStore, Tensor, Var};

const CKPT_MAGIC: &[u8; 4] = b"MBCK";
const CKPT_VERSION: u16 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability that a batch document is excluded from the backward
    /// pass (it still participates in aggregation via stop-gradient).
    pub rho_back: f64,
    /// Fraction of total steps spent linearly warming the learning rate.
    pub warmup_frac: f64,
    pub lambda_vq: f64,
    pub reset_dead_codes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 8,
            rho_back: 0.75,
            warmup_frac: 0.1,
            lambda_vq: 1.0,
            reset_dead_codes: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(MbcError::Config("batch size and epochs must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(MbcError::Config("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.rho_back) {
            return Err(MbcError::Config(format!("rho_back {} not in [0,1)", self.rho_back)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || self.lambda_vq < 0.0 {
            return Err(MbcError::Config(
                "warmup fraction must be in [0,1] and lambda_vq >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// L_total = L_QA + lambda * L_VQ.
pub fn total_loss(l_qa: f64, l_vq: f64, lambda_vq: f64) -> f64 {
    l_qa + lambda_vq * l_vq
}

/// Per-document backward mask: true keeps gradients. At least one true
/// entry is guaranteed (all-dropped draws are resampled).
pub fn backprop_dropout_mask(k: usize, rho_back: f64, rng: &mut ModelRng) -> Vec<bool> {
    if rho_back == 0.0 {
        return vec![true; k];
    }
    loop {
        let mask: Vec<bool> = (0..k).map(|_| !rng.bernoulli(rho_back)).collect();
        if mask.iter().any(|&m| m) {
            return mask;
        }
    }
}

#[derive(Clone)]
pub struct TrainExample {
    pub doc_id: String,
    pub doc_tokens: Vec<usize>,
    pub question_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    pub question: String,
    pub answer: String,
}

pub fn prepare_examples(
    model: &Model,
    docs: &[Document],
    qa: &[QARecord],
    idx: &[usize],
) -> Result<Vec<TrainExample>> {
    idx.iter()
        .map(|&i| {
            let doc = &docs[i];
            let rec = &qa[i];
            let answer_tokens = model.encode_text(&rec.answer);
            if answer_tokens.is_empty() {
                return Err(MbcError::Corpus(format!("document '{}' has an empty answer", doc.doc_id)));
            }
            Ok(TrainExample {
                doc_id: doc.doc_id.clone(),
                doc_tokens: model.encode_text(&doc.text),
                question_tokens: model.encode_text(&rec.question),
                answer_tokens,
                question: rec.question.clone(),
                answer: rec.answer.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_qa: f64,
    pub mean_vq: f64,
    pub perplexity: f64,
    pub resets: usize,
    pub lr: f64,
    pub val_em: Option<f64>,
    pub val_f1: Option<f64>,
}

pub struct TrainState {
    pub model: Model,
    pub opt: AdamOptimizer,
    pub epoch: usize,
    pub step: usize,
    pub warmup_steps: usize,
    pub best_em: f64,
    pub best_f1: f64,
    /// Parameters and usage at the best-EM validation so far.
    pub best: Option<(ParamStore, Codebook)>,
}

impl TrainState {
    /// `n_train` sizes the warmup window (a fraction of all planned steps).
    pub fn new(model: Model, n_train: usize) -> Self {
        let t = &model.cfg.training;
        let steps_per_epoch = n_train.div_ceil(t.batch_size.max(1)).max(1);
        let total = t.epochs * steps_per_epoch;
        let warmup_steps = ((t.warmup_frac * total as f64).round() as usize).max(1);
        TrainState {
            model,
            opt: AdamOptimizer::new(AdamHyper::default()),
            epoch: 0,
            step: 0,
            warmup_steps,
            best_em: f64::NEG_INFINITY,
            best_f1: f64::NEG_INFINITY,
            best: None,
        }
    }

    /// Linear warmup to the configured rate, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.model.cfg.training.learning_rate;
        if step < self.warmup_steps {
            base * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            base
        }
    }
}

struct BatchStats {
    total: f64,
    qa: f64,
    vq: f64,
    resets: usize,
    lr: f64,
}

fn train_batch(state: &mut TrainState, batch: &[TrainExample]) -> Result<BatchStats> {
    let train_cfg = state.model.cfg.training.clone();
    let Model { cfg, store, codebook, rng, .. } = &mut state.model;

    let mut g = Graph::new();
    let entries_var = g.bind(store, CODEBOOK_ENTRIES)?;
    let mut phis: Vec<Var> = Vec::with_capacity(batch.len());
    let mut hards: Vec<Var> = Vec::with_capacity(batch.len());
    let mut stes: Vec<Var> = Vec::with_capacity(batch.len());
    let mut codes_flat: Vec<usize> = Vec::new();
    for ex in batch {
        let phi = encode_document(&mut g, store, AMORT_PREFIX, &cfg.encoder, &ex.doc_tokens)?;
        let q = quantize_ste(&mut g, phi, entries_var)?;
        codes_flat.extend_from_slice(&q.codes);
        phis.push(phi);
        hards.push(q.hard);
        stes.push(q.ste);
    }

    codebook.update_usage(&codes_flat);
    let resets = if train_cfg.reset_dead_codes {
        let phi_vals: Vec<Tensor> = phis.iter().map(|&p| g.value(p).clone()).collect();
        let rows: Vec<&[f64]> = phi_vals
            .iter()
            .flat_map(|t| (0..t.rows()).map(move |i| t.row(i)))
            .collect();
        let entries = &mut store.get_mut(CODEBOOK_ENTRIES)?.value;
        codebook.reset_dead_codes(entries, &rows, rng).reset_indices.len()
    } else {
        0
    };

    let grad_mask = backprop_dropout_mask(batch.len(), train_cfg.rho_back, rng);
    let mut totals: Vec<Var> = Vec::with_capacity(batch.len());
    let mut qa_sum = 0.0;
    let mut vq_sum = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let qrep = encode_query(&mut g, store, INPUT_PREFIX, &cfg.encoder, &ex.question_tokens)?;
        let agg_entries: Vec<Var> = stes
            .iter()
            .enumerate()
            .map(|(j, &v)| if grad_mask[j] { v } else { g.stop_grad(v) })
            .collect();
        let summary = aggregate(&mut g, store, &cfg.aggregator, qrep, &agg_entries)?;
        let l_qa = qa_loss(
            &mut g,
            store,
            &cfg.decoder,
            Some(summary),
            &ex.question_tokens,
            &ex.answer_tokens,
            &mut DropoutMode::Enabled(rng),
        )?;
        let l_vq = vq_loss(&mut g, phis[i], hards[i], cfg.quantizer.beta_commit)?;
        qa_sum += g.value(l_qa).scalar_value()?;
        vq_sum += g.value(l_vq).scalar_value()?;
        // lambda = 0 omits the term entirely so no gradient path reaches E
        let total = if train_cfg.lambda_vq > 0.0 {
            let scaled = g.scale(l_vq, train_cfg.lambda_vq);
            g.add(l_qa, scaled)?
        } else {
            l_qa
        };
        totals.push(total);
    }
    let loss = g.mean_scalars(&totals)?;
    let loss_val = g.value(loss).scalar_value()?;
    let qa_mean = qa_sum / batch.len() as f64;
    let vq_mean = vq_sum / batch.len() as f64;
    if !loss_val.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|e| e.doc_id.as_str()).collect();
        return Err(MbcError::Training(format!(
            "non-finite loss {loss_val} (qa {qa_mean}, vq {vq_mean}) on batch [{}]",
            ids.join(", ")
        )));
    }
    g.backward(loss)?;
    let grads = g.named_grads();
    let lr = state.lr_at(state.step);
    let Model { store, .. } = &mut state.model;
    state.opt.apply(store, &grads, lr)?;
    state.step += 1;
    Ok(BatchStats {
        total: total_loss(qa_mean, vq_mean, train_cfg.lambda_vq),
        qa: qa_mean,
        vq: vq_mean,
        resets,
        lr,
    })
}

/// One pass over `examples` in shuffled order.
pub fn train_epoch(state: &mut TrainState, examples: &[TrainExample]) -> Result<EpochMetrics> {
    if examples.is_empty() {
        return Err(MbcError::Training("no training examples".into()));
    }
    let k = state.model.cfg.training.batch_size;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    state.model.rng.shuffle(&mut order);
    let mut sums = (0.0, 0.0, 0.0);
    let mut resets = 0usize;
    let mut last_lr = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(k) {
        let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
        let stats = train_batch(state, &batch)?;
        sums.0 += stats.total;
        sums.1 += stats.qa;
        sums.2 += stats.vq;
        resets += stats.resets;
        last_lr = stats.lr;
        batches += 1;
    }
    state.epoch += 1;
    let n = batches as f64;
    Ok(EpochMetrics {
        epoch: state.epoch,
        mean_total: sums.0 / n,
        mean_qa: sums.1 / n,
        mean_vq: sums.2 / n,
        perplexity: state.model.codebook.perplexity().unwrap_or(1.0),
        resets,
        lr: last_lr,
        val_em: None,
        val_f1: None,
    })
}

/// Memorize the held-out docs into a temporary bank and score the
/// held-out questions with the adaptation metrics.
pub fn validate(
    model: &Model,
    docs: &[Document],
    qa: &[QARecord],
    idx: &[usize],
) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Err(MbcError::Training("empty validation set".into()));
    }
    let mut bank = new_bank(model)?;
    for &i in idx {
        memorize(model, &mut bank, &docs[i])?;
    }
    let mut preds = Vec::with_capacity(idx.len());
    let mut golds = Vec::with_capacity(idx.len());
    for &i in idx {
        preds.push(answer(model, &bank, &qa[i].question)?);
        golds.push(qa[i].answer.clone());
    }
    Ok((exact_match(&preds, &golds)?, mean_token_f1(&preds, &golds)?))
}

/// Run epochs until the configured count, validating after each epoch and
/// retaining the best-EM parameters (ties broken by F1). `on_epoch` sees
/// every metrics record as it is produced.
pub fn train_run(
    state: &mut TrainState,
    docs: &[Document],
    qa: &[QARecord],
    train_idx: &[usize],
    val_idx: &[usize],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let examples = prepare_examples(&state.model, docs, qa, train_idx)?;
    let mut history = Vec::new();
    while state.epoch < state.model.cfg.training.epochs {
        let mut metrics = train_epoch(state, &examples)?;
        if !val_idx.is_empty() {
            let (em, f1) = validate(&state.model, docs, qa, val_idx)?;
            metrics.val_em = Some(em);
            metrics.val_f1 = Some(f1);
            if em > state.best_em || (em == state.best_em && f1 > state.best_f1) {
                state.best_em = em;
                state.best_f1 = f1;
                state.best = Some((state.model.store.clone(), state.model.codebook.clone()));
            }
        }
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok(history)
}

fn write_store(w: &mut impl Write, store: &ParamStore) -> Result<()> {
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        write_string(w, name)?;
        w.write_all(&(p.value.rows() as u32).to_le_bytes())?;
        w.write_all(&(p.value.cols() as u32).to_le_bytes())?;
        w.write_all(&[p.trainable as u8])?;
        write_f64s(w, p.value.data())?;
    }
    Ok(())
}

fn read_store<R: std::io::Read>(r: &mut ByteReader<R>) -> Result<ParamStore> {
    let count = r.u32("parameter count")? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let rows = r.u32("parameter rows")? as usize;
        let cols = r.u32("parameter cols")? as usize;
        let trainable = r.u8("trainable flag")? != 0;
        let data = r.f64_vec(rows * cols, "parameter data")?;
        store.insert(&name, Tensor::new(rows, cols, data)?, trainable)?;
    }
    Ok(store)
}

fn write_usage(w: &mut impl Write, cb: &Codebook) -> Result<()> {
    w.write_all(&(cb.usage.len() as u32).to_le_bytes())?;
    write_f64s(w, &cb.usage)?;
    Ok(())
}

/// Everything needed to continue training bit-for-bit: config, tokenizer,
/// parameters, optimizer accumulators, usage, RNG position, counters, and
/// the retained best parameters.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    write_blob(&mut w, state.model.cfg.to_canonical_json()?.as_bytes())?;
    write_blob(&mut w, serde_json::to_string(&state.model.vocab)?.as_bytes())?;
    write_store(&mut w, &state.model.store)?;
    w.write_all(&(state.opt.states.len() as u32).to_le_bytes())?;
    for (name, s) in &state.opt.states {
        write_string(&mut w, name)?;
        w.write_all(&s.step.to_le_bytes())?;
        w.write_all(&(s.m.len() as u32).to_le_bytes())?;
        write_f64s(&mut w, &s.m)?;
        write_f64s(&mut w, &s.v)?;
    }
    write_usage(&mut w, &state.model.codebook)?;
    w.write_all(&state.model.rng.seed().to_le_bytes())?;
    w.write_all(&state.model.rng.word_pos().to_le_bytes())?;
    w.write_all(&(state.epoch as u32).to_le_bytes())?;
    w.write_all(&(state.step as u64).to_le_bytes())?;
    w.write_all(&(state.warmup_steps as u64).to_le_bytes())?;
    w.write_all(&state.best_em.to_le_bytes())?;
    w.write_all(&state.best_f1.to_le_bytes())?;
    match &state.best {
        Some((store, cb)) => {
            w.write_all(&[1u8])?;
            write_store(&mut w, store)?;
            write_usage(&mut w, cb)?;
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut r = ByteReader { inner: BufReader::new(File::open(path)?) };
    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if &magic != CKPT_MAGIC {
        return Err(MbcError::Format(format!("not a checkpoint file (magic {magic:02x?})")));
    }
    let version = r.u16("version")?;
    if version != CKPT_VERSION {
        return Err(MbcError::Format(format!(
            "unsupported checkpoint version {version}, expected {CKPT_VERSION}"
        )));
    }
    let cfg_json = String::from_utf8(r.blob("config")?)
        .map_err(|_| MbcError::Format("config is not UTF-8".into()))?;
    let cfg = RunConfig::from_json(&cfg_json)?;
    let vocab_json = String::from_utf8(r.blob("vocabulary")?)
        .map_err(|_| MbcError::Format("vocabulary is not UTF-8".into()))?;
    let mut vocab: Vocabulary = serde_json::from_str(&vocab_json)?;
    vocab.reindex();
    let store = read_store(&mut r)?;
    if !store.contains(CODEBOOK_ENTRIES) {
        return Err(MbcError::Format("checkpoint has no codebook entries".into()));
    }
    let mut opt = AdamOptimizer::new(AdamHyper::default());
    let n_states = r.u32("optimizer state count")? as usize;
    for _ in 0..n_states {
        let name = r.string("optimizer param name")?;
        let step = r.u64("optimizer step")?;
        let n = r.u32("optimizer vector length")? as usize;
        let m = r.f64_vec(n, "optimizer m")?;
        let v = r.f64_vec(n, "optimizer v")?;
        opt.states.insert(name, AdamState { m, v, step });
    }
    let usage_len = r.u32("usage length")? as usize;
    let usage = r.f64_vec(usage_len, "usage")?;
    let mut codebook = Codebook::new(
        cfg.quantizer.n_codes,
        cfg.encoder.embed_dim,
        cfg.quantizer.gamma,
        cfg.quantizer.epsilon,
    )?;
    if usage.len() != codebook.usage.len() {
        return Err(MbcError::Format("usage length disagrees with config".into()));
    }
    codebook.usage = usage;
    let seed = r.u64("rng seed")?;
    let word_pos = r.u128("rng position")?;
    let epoch = r.u32("epoch")? as usize;
    let step = r.u64("step")? as usize;
    let warmup_steps = r.u64("warmup steps")? as usize;
    let best_em = r.f64("best em")?;
    let best_f1 = r.f64("best f1")?;
    let best = if r.u8("best flag")? != 0 {
        let bstore = read_store(&mut r)?;
        let blen = r.u32("best usage length")? as usize;
        let busage = r.f64_vec(blen, "best usage")?;
        let mut bcb = codebook.clone();
        if busage.len() != bcb.usage.len() {
            return Err(MbcError::Format("best usage length disagrees with config".into()));
        }
        bcb.usage = busage;
        Some((bstore, bcb))
    } else {
        None
    };
    r.expect_eof()?;
    let model = Model {
        cfg,
        vocab,
        store,
        codebook,
        rng: ModelRng::restore(seed, word_pos),
    };
    Ok(TrainState { model, opt, epoch, step, warmup_steps, best_em, best_f1, best })
}
