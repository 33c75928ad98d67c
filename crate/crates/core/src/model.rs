//! Whole-model assembly: one parameter store holding the document encoder,
//! query encoder, aggregator, frozen decoder, adapters, and codebook, plus
//! the shared RNG and tokenizer.

use crate::aggregator::init_aggregator;
use crate::codebook::{init_codebook_entries, nearest_codes, Codebook};
use crate::config::RunConfig;
use crate::corpus::Vocabulary;
use crate::decoder::{init_decoder, BASE_PREFIX, LORA_PREFIX};
use crate::encoder::{encode_document_value, encode_query_value, init_encoder, ContextVector, QueryRep};
use crate::error::{MbcError, Result};
use crate::num::{ModelRng, ParamStore, Tensor};

pub const AMORT_PREFIX: &str = "amort.";
pub const INPUT_PREFIX: &str = "input.";
pub const CODEBOOK_ENTRIES: &str = "codebook.e";

pub struct Model {
    pub cfg: RunConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub codebook: Codebook,
    pub rng: ModelRng,
}

impl Model {
    /// Initialization draws from one seeded stream in a fixed order:
    /// document encoder, query encoder, aggregator, frozen base decoder,
    /// adapters, codebook entries. Changing the order changes the model,
    /// so it is part of the checkpoint contract.
    pub fn new(cfg: RunConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        if vocab.len() > cfg.encoder.vocab_size {
            return Err(MbcError::Config(format!(
                "vocabulary of {} tokens exceeds configured size {}",
                vocab.len(),
                cfg.encoder.vocab_size
            )));
        }
        let mut rng = ModelRng::new(cfg.seed);
        let mut store = ParamStore::new();
        init_encoder(&mut store, AMORT_PREFIX, &cfg.encoder, &mut rng, true)?;
        init_encoder(&mut store, INPUT_PREFIX, &cfg.encoder, &mut rng, false)?;
        init_aggregator(&mut store, &cfg.aggregator, &mut rng)?;
        init_decoder(&mut store, &cfg.decoder, &mut rng)?;
        let entries =
            init_codebook_entries(cfg.quantizer.n_codes, cfg.encoder.embed_dim, &mut rng);
        store.insert(CODEBOOK_ENTRIES, entries, true)?;
        let codebook = Codebook::new(
            cfg.quantizer.n_codes,
            cfg.encoder.embed_dim,
            cfg.quantizer.gamma,
            cfg.quantizer.epsilon,
        )?;
        Ok(Model { cfg, vocab, store, codebook, rng })
    }

    pub fn codebook_entries(&self) -> &Tensor {
        &self.store.get(CODEBOOK_ENTRIES).expect("codebook entries").value
    }

    /// Tokenize and clip to the encoder window.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        let mut toks = self.vocab.encode(text);
        toks.truncate(self.cfg.encoder.max_sequence_length);
        toks
    }

    /// Forward-only document encoding.
    pub fn document_context(&self, doc_id: &str, text: &str) -> Result<ContextVector> {
        let toks = self.encode_text(text);
        encode_document_value(&self.store, AMORT_PREFIX, &self.cfg.encoder, &toks, doc_id)
    }

    /// Forward-only document encoding plus nearest-code assignment.
    pub fn quantize_document(&self, doc_id: &str, text: &str) -> Result<(ContextVector, Vec<u32>)> {
        let ctx = self.document_context(doc_id, text)?;
        let codes = nearest_codes(&ctx.values, self.codebook_entries())?;
        Ok((ctx, codes.into_iter().map(|c| c as u32).collect()))
    }

    pub fn query_rep(&self, question: &str) -> Result<QueryRep> {
        let toks = self.encode_text(question);
        encode_query_value(&self.store, INPUT_PREFIX, &self.cfg.encoder, &toks)
    }

    /// Hash of every parameter (frozen and trainable).
    pub fn param_hash(&self) -> [u8; 32] {
        self.store.hash_all()
    }

    /// Hash of the frozen decoder weights only.
    pub fn base_hash(&self) -> [u8; 32] {
        self.store.hash_filtered(|n| n.starts_with(BASE_PREFIX))
    }

    pub fn group_counts(&self) -> ParamGroupCounts {
        ParamGroupCounts {
            amort: self.store.count_prefix(AMORT_PREFIX),
            input: self.store.count_prefix(INPUT_PREFIX),
            aggregator: self.store.count_prefix(crate::aggregator::AGG_PREFIX),
            base: self.store.count_prefix(BASE_PREFIX),
            lora: self.store.count_prefix(LORA_PREFIX),
            codebook: self.store.count_prefix(CODEBOOK_ENTRIES),
        }
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct ParamGroupCounts {
    pub amort: usize,
    pub input: usize,
    pub aggregator: usize,
    pub base: usize,
    pub lora: usize,
    pub codebook: usize,
}

impl ParamGroupCounts {
    /// Extra memorization-specific parameters (codebook + adapters) as a
    /// percentage of everything a continuous-bank baseline would train.
    pub fn overhead_pct(&self) -> f64 {
        let baseline = self.amort + self.input + self.aggregator + self.base;
        100.0 * (self.codebook + self.lora) as f64 / baseline as f64
    }
}

/// Closed-form overhead at arbitrary scale: codebook plus adapters, and
/// the percentage against a given baseline parameter total.
pub fn overhead_closed_form(
    n_codes: usize,
    dim: usize,
    rank: usize,
    adapted_layers: usize,
    share_down: bool,
    baseline_params: usize,
) -> (usize, f64) {
    let per_layer = if share_down { 3 } else { 4 };
    let extra = n_codes * dim + adapted_layers * per_layer * rank * dim;
    (extra, 100.0 * extra as f64 / baseline_params as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen_synthetic;

    pub(crate) fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::toy_default();
        cfg.encoder.embed_dim = 16;
        cfg.encoder.num_blocks = 1;
        cfg.encoder.num_heads = 2;
        cfg.encoder.output_tokens = 4;
        cfg.encoder.vocab_size = 128;
        cfg.aggregator.dim = 16;
        cfg.aggregator.tokens = 4;
        cfg.aggregator.num_blocks = 2;
        cfg.aggregator.num_heads = 2;
        cfg.decoder.embed_dim = 16;
        cfg.decoder.num_heads = 2;
        cfg.decoder.num_layers = 2;
        cfg.decoder.lora_layers = 1;
        cfg.decoder.lora_rank = 2;
        cfg.decoder.vocab_size = 128;
        cfg.quantizer.n_codes = 16;
        cfg
    }

    fn tiny_model(seed: u64) -> Model {
        let mut cfg = tiny_config();
        cfg.seed = seed;
        let corpus = gen_synthetic(8, 0);
        let vocab = Vocabulary::build(
            corpus.documents.iter().map(|d| d.text.as_str()).chain(
                corpus.qa.iter().flat_map(|q| {
                    [q.question.as_str(), q.answer.as_str()]
                }),
            ),
        );
        Model::new(cfg, vocab).unwrap()
    }

    #[test]
    fn construction_is_deterministic_in_seed() {
        let a = tiny_model(3);
        let b = tiny_model(3);
        let c = tiny_model(4);
        assert_eq!(a.param_hash(), b.param_hash());
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn group_counts_cover_the_store() {
        let m = tiny_model(5);
        let g = m.group_counts();
        let total: usize = m.store.iter().map(|(_, p)| p.value.numel()).sum();
        assert_eq!(g.amort + g.input + g.aggregator + g.base + g.lora + g.codebook, total);
        assert_eq!(g.codebook, 16 * 16);
        assert_eq!(g.lora, m.cfg.decoder.lora_param_count());
        assert!(g.overhead_pct() > 0.0);
    }

    #[test]
    fn closed_form_overhead_at_reference_scale() {
        let (extra, pct) = overhead_closed_form(512, 768, 16, 6, true, 197_000_000);
        assert_eq!(extra, 512 * 768 + 6 * 3 * 16 * 768);
        assert!((extra as f64 - 600_000.0).abs() / 600_000.0 < 0.2);
        assert!(pct < 0.5);
        // doubling the codebook doubles its share exactly
        let (extra2, _) = overhead_closed_form(1024, 768, 16, 6, true, 197_000_000);
        assert_eq!(extra2 - extra, 512 * 768);
        // disabled adapters leave the codebook term only
        let (e0, _) = overhead_closed_form(512, 768, 0, 0, true, 197_000_000);
        assert_eq!(e0, 512 * 768);
    }

    #[test]
    fn quantize_document_round_trip() {
        let m = tiny_model(6);
        let (ctx, codes) = m.quantize_document("d0", "entity ent0 attribute attr1 value val2").unwrap();
        assert_eq!(ctx.values.shape(), (4, 16));
        assert_eq!(codes.len(), 4);
        assert!(codes.iter().all(|&c| (c as usize) < 16));
        // assignment agrees with a fresh nearest-code scan
        let again = nearest_codes(&ctx.values, m.codebook_entries()).unwrap();
        assert_eq!(codes, again.iter().map(|&c| c as u32).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_vocabulary_rejected() {
        let mut cfg = tiny_config();
        cfg.encoder.vocab_size = 8;
        cfg.decoder.vocab_size = 8;
        let corpus = gen_synthetic(16, 0);
        let vocab = Vocabulary::build(corpus.documents.iter().map(|d| d.text.as_str()));
        assert!(Model::new(cfg, vocab).is_err());
    }
}
