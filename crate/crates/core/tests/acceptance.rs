//! End-to-end acceptance checks. Each test prints a single pass/fail line
//! for its criterion (visible under `--nocapture`; failures always show).

use mbc::adaptation::{
    self, answer, answer_without_memory, exact_match, memorize, new_bank, normalize_answer,
    retention_experiment, token_f1,
};
use mbc::aggregator::{aggregate, hierarchical_aggregate};
use mbc::codebook::{nearest_codes, quantize_ste, vq_loss};
use mbc::config::RunConfig;
use mbc::corpus::{gen_synthetic, Vocabulary};
use mbc::decoder::{forward_modulated, qa_loss, DropoutMode};
use mbc::encoder::{encode_document, encode_query};
use mbc::membank::FootprintReport;
use mbc::model::{overhead_closed_form, Model};
use mbc::num::{
    finite_difference_gradient, max_rel_error, Graph, ModelRng, ParamStore, Tensor, Var,
};
use mbc::training::{train_run, TrainState};

type Check = std::result::Result<(), String>;

macro_rules! expect {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn report(id: usize, name: &str, result: Check) {
    match result {
        Ok(()) => println!("acceptance {id:02} {name}: pass"),
        Err(e) => {
            println!("acceptance {id:02} {name}: FAIL — {e}");
            panic!("acceptance {id:02} {name} failed: {e}");
        }
    }
}

/// Small-but-trainable configuration shared by the end-to-end checks.
fn tiny_cfg(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::toy_default();
    cfg.seed = seed;
    cfg.encoder.vocab_size = 128;
    cfg.encoder.embed_dim = 16;
    cfg.encoder.num_blocks = 1;
    cfg.encoder.num_heads = 2;
    cfg.encoder.max_sequence_length = 32;
    cfg.encoder.output_tokens = 4;
    cfg.aggregator.dim = 16;
    cfg.aggregator.tokens = 4;
    cfg.aggregator.num_blocks = 2;
    cfg.aggregator.num_heads = 2;
    cfg.decoder.vocab_size = 128;
    cfg.decoder.embed_dim = 16;
    cfg.decoder.num_layers = 2;
    cfg.decoder.num_heads = 2;
    cfg.decoder.lora_layers = 1;
    cfg.decoder.lora_rank = 4;
    cfg.decoder.max_sequence_length = 32;
    cfg.quantizer.n_codes = 16;
    cfg
}

/// Vocabulary over every document and question of a synthetic corpus.
fn full_vocab(corpus: &mbc::corpus::SyntheticCorpus) -> Vocabulary {
    Vocabulary::build(
        corpus
            .documents
            .iter()
            .map(|d| d.text.as_str())
            .chain(corpus.qa.iter().map(|r| r.question.as_str())),
    )
}

// 1. Published-scale footprints: N_c=512, D=768, T=12, f32 elements,
// 8-byte indices, decimal megabytes.
#[test]
fn footprint_scaling() {
    report(1, "footprint-scaling", (|| -> Check {
        let mac = [8.21, 16.42, 24.63, 32.84, 41.04, 49.25, 57.46, 65.67];
        let mbc = [1.52, 1.54, 1.56, 1.59, 1.61, 1.63, 1.65, 1.67];
        for (i, (&mac_mb, &mbc_mb)) in mac.iter().zip(&mbc).enumerate() {
            let docs = 200 * (i + 1);
            let fp = FootprintReport::new(512, 768, 12, docs);
            let mac_err = (fp.continuous_mb - mac_mb).abs() / mac_mb;
            let mbc_err = (fp.compressed_mb - mbc_mb).abs() / mbc_mb;
            expect!(
                mac_err < 0.15,
                "continuous bank at {docs} docs: {:.4} MB vs {mac_mb} ({:.1}% off)",
                fp.continuous_mb,
                100.0 * mac_err
            );
            expect!(
                mbc_err < 0.15,
                "compressed bank at {docs} docs: {:.4} MB vs {mbc_mb} ({:.1}% off)",
                fp.compressed_mb,
                100.0 * mbc_err
            );
        }
        let fp = FootprintReport::new(512, 768, 12, 1600);
        expect!(fp.reduction_pct >= 97.0, "reduction at 1600 docs {:.2}% < 97%", fp.reduction_pct);
        Ok(())
    })());
}

// 2. Closed-form extra parameters: codebook + shared-down KV adapters on
// 6 layers at D=768, r=16 come to ~0.6M and < 0.5% of a 197M baseline.
#[test]
fn parameter_overhead() {
    report(2, "parameter-overhead", (|| -> Check {
        let (extra, pct) = overhead_closed_form(512, 768, 16, 6, true, 197_000_000);
        expect!(extra == 512 * 768 + 6 * 3 * 16 * 768, "extra params {extra}");
        let rel = (extra as f64 - 600_000.0).abs() / 600_000.0;
        expect!(rel < 0.20, "extra {extra} is {:.1}% from 0.6M", 100.0 * rel);
        expect!(pct < 0.5, "overhead {pct:.3}% >= 0.5%");
        Ok(())
    })());
}

// 3. nearest-code assignment agrees with exhaustive brute force on 1,000
// random instances, including the ties-to-lowest-index rule.
#[test]
fn quantizer_brute_force() {
    report(3, "quantizer-brute-force", (|| -> Check {
        let mut rng = ModelRng::new(301);
        for trial in 0..1_000 {
            let t = 1 + rng.below(8);
            let n = 1 + rng.below(32);
            let d = 1 + rng.below(8);
            // quantized draws force frequent exact ties
            let mut phi = Tensor::zeros(t, d);
            for x in phi.data_mut() {
                *x = (rng.uniform(-2.0, 2.0) * 2.0).round() / 2.0;
            }
            let mut entries = Tensor::zeros(n, d);
            for x in entries.data_mut() {
                *x = (rng.uniform(-2.0, 2.0) * 2.0).round() / 2.0;
            }
            let fast = nearest_codes(&phi, &entries).map_err(|e| e.to_string())?;
            for row in 0..t {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for j in 0..n {
                    let dist: f64 = (0..d)
                        .map(|k| (phi.at(row, k) - entries.at(j, k)).powi(2))
                        .sum();
                    if dist < best_d {
                        best_d = dist;
                        best = j;
                    }
                }
                expect!(
                    fast[row] == best,
                    "trial {trial} row {row}: got code {}, brute force {best}",
                    fast[row]
                );
            }
        }
        Ok(())
    })());
}

// 4. Straight-through forward identity, plus full-pipeline gradients
// (encoder, aggregator, adapters, codebook) against central differences.
#[test]
fn gradient_integrity() {
    report(4, "gradient-integrity", (|| -> Check {
        let cfg = tiny_cfg(401);
        let corpus = gen_synthetic(4, 401);
        let model = Model::new(cfg.clone(), full_vocab(&corpus)).map_err(|e| e.to_string())?;
        let mut store = model.store.clone();
        // non-trivial adapters so gradients reach the down-projections
        store.get_mut("lora.blk1.b_k").unwrap().value =
            ModelRng::new(402).normal_tensor(cfg.decoder.lora_rank, cfg.decoder.embed_dim, 0.1);

        let doc_toks = model.encode_text(&corpus.documents[0].text);
        let q_toks = model.encode_text(&corpus.qa[0].question);
        let a_toks = model.encode_text(&corpus.qa[0].answer);

        let pipeline = |g: &mut Graph, store: &ParamStore, rng: &mut ModelRng| -> mbc::Result<(Var, Var, Var)> {
            let entries = g.bind(store, "codebook.e")?;
            let phi = encode_document(g, store, "amort.", &cfg.encoder, &doc_toks)?;
            let q = quantize_ste(g, phi, entries)?;
            let qrep = encode_query(g, store, "input.", &cfg.encoder, &q_toks)?;
            let summary = aggregate(g, store, &cfg.aggregator, qrep, &[q.ste])?;
            let l_qa = qa_loss(g, store, &cfg.decoder, Some(summary), &q_toks, &a_toks,
                &mut DropoutMode::Enabled(rng))?;
            let l_vq = vq_loss(g, phi, q.hard, cfg.quantizer.beta_commit)?;
            let scaled = g.scale(l_vq, cfg.training.lambda_vq);
            let loss = g.add(l_qa, scaled)?;
            Ok((loss, q.ste, q.hard))
        };

        let mut g = Graph::new();
        let mut rng = ModelRng::new(403);
        let (loss, ste, hard) = pipeline(&mut g, &store, &mut rng).map_err(|e| e.to_string())?;
        expect!(
            g.value(ste).data() == g.value(hard).data(),
            "straight-through forward differs from the hard assignment"
        );
        g.backward(loss).map_err(|e| e.to_string())?;
        let grads = g.named_grads();
        let log = g.take_log();

        for name in ["amort.blk0.wq", "agg.blk0.wq", "lora.blk1.b_k", "lora.blk1.a", "codebook.e"] {
            let analytic = grads
                .get(name)
                .ok_or_else(|| format!("no gradient recorded for {name}"))?;
            let base = store.get(name).unwrap().value.clone();
            let mut f = |probe: &Tensor| -> mbc::Result<f64> {
                let mut s2 = store.clone();
                s2.get_mut(name).unwrap().value = probe.clone();
                let mut gg = Graph::new_replay(log.clone());
                let mut r2 = ModelRng::new(0); // ignored during replay
                let (l, _, _) = pipeline(&mut gg, &s2, &mut r2)?;
                gg.value(l).scalar_value()
            };
            let numeric =
                finite_difference_gradient(&mut f, &base, 1e-5).map_err(|e| e.to_string())?;
            let err = max_rel_error(analytic, &numeric);
            expect!(err < 1e-5, "{name}: max relative error {err:.3e} >= 1e-5");
        }
        Ok(())
    })());
}

// 5. Zero-init adapters plus no memory reproduce a decoder built without
// adapters bit-exactly, and the frozen base never moves during training.
#[test]
fn frozen_base_no_op() {
    report(5, "frozen-base-no-op", (|| -> Check {
        let corpus = gen_synthetic(16, 501);
        let vocab = full_vocab(&corpus);
        let cfg = tiny_cfg(501);
        let mut bare = tiny_cfg(501);
        bare.decoder.lora_layers = 0;
        let with_adapters = Model::new(cfg, vocab.clone()).map_err(|e| e.to_string())?;
        let without = Model::new(bare, vocab).map_err(|e| e.to_string())?;

        let tokens = [2usize, 5, 9, 7, 4];
        let logits = |m: &Model| -> mbc::Result<Tensor> {
            let mut g = Graph::new();
            let out = forward_modulated(&mut g, &m.store, &m.cfg.decoder, None, &tokens,
                &mut DropoutMode::Disabled)?;
            Ok(g.value(out).clone())
        };
        let a = logits(&with_adapters).map_err(|e| e.to_string())?;
        let b = logits(&without).map_err(|e| e.to_string())?;
        expect!(a.data() == b.data(), "adapter-equipped logits differ from the bare decoder");

        let mut state = TrainState::new(with_adapters, corpus.train.len());
        state.model.cfg.training.epochs = 18;
        state.model.cfg.training.batch_size = 4;
        let base_hash = state.model.base_hash();
        train_run(&mut state, &corpus.documents, &corpus.qa, &corpus.train, &[], |_| {})
            .map_err(|e| e.to_string())?;
        expect!(state.step >= 50, "only {} optimizer steps taken", state.step);
        expect!(state.model.base_hash() == base_hash, "frozen base hash changed");
        Ok(())
    })());
}

// 6. Dead-code resetting rescues an adversarial low-diversity codebook:
// usage perplexity at least doubles versus the identical run without
// resetting, which stays collapsed below N_c/8.
#[test]
fn collapse_and_reset() {
    report(6, "collapse-and-reset", (|| -> Check {
        let corpus = gen_synthetic(64, 601);
        let vocab = full_vocab(&corpus);
        let run = |reset: bool| -> mbc::Result<f64> {
            let mut cfg = tiny_cfg(601);
            cfg.quantizer.n_codes = 64;
            cfg.training.epochs = 10;
            cfg.training.batch_size = 8;
            cfg.training.reset_dead_codes = reset;
            let mut model = Model::new(cfg, vocab.clone())?;
            // adversarial initialization: every entry identical
            let e = &mut model.store.get_mut("codebook.e").unwrap().value;
            let first: Vec<f64> = e.row(0).to_vec();
            for r in 0..e.rows() {
                e.row_mut(r).copy_from_slice(&first);
            }
            let mut state = TrainState::new(model, corpus.qa.len());
            let all: Vec<usize> = (0..corpus.qa.len()).collect();
            train_run(&mut state, &corpus.documents, &corpus.qa, &all, &[], |_| {})?;
            state.model.codebook.perplexity()
        };
        let with_reset = run(true).map_err(|e| e.to_string())?;
        let without = run(false).map_err(|e| e.to_string())?;
        expect!(
            without < 64.0 / 8.0,
            "no-reset run did not collapse: perplexity {without:.2} >= 8"
        );
        expect!(
            with_reset >= 2.0 * without,
            "resetting gained only {:.2}x (perplexities {with_reset:.2} vs {without:.2})",
            with_reset / without
        );
        Ok(())
    })());
}

// 7. The memory pathway carries the answers: after 50 epochs on 256 facts,
// held-in exact match with the populated bank beats the emptied-bank
// baseline (forced to answer from the query alone) by at least 0.3.
#[test]
fn memory_matters() {
    report(7, "memory-matters", (|| -> Check {
        let corpus = gen_synthetic(256, 701);
        let mut cfg = RunConfig::toy_default();
        cfg.seed = 701;
        cfg.encoder.embed_dim = 32;
        cfg.encoder.num_blocks = 2;
        cfg.encoder.num_heads = 4;
        cfg.encoder.max_sequence_length = 32;
        cfg.encoder.output_tokens = 8;
        cfg.aggregator.dim = 32;
        cfg.aggregator.tokens = 8;
        cfg.aggregator.num_blocks = 3;
        cfg.aggregator.num_heads = 4;
        cfg.aggregator.group_size = 256;
        cfg.decoder.embed_dim = 32;
        cfg.decoder.num_layers = 3;
        cfg.decoder.num_heads = 4;
        cfg.decoder.max_sequence_length = 32;
        cfg.quantizer.n_codes = 64;
        cfg.training.epochs = 50;
        cfg.training.batch_size = 8;

        let model = Model::new(cfg, full_vocab(&corpus)).map_err(|e| e.to_string())?;
        let all: Vec<usize> = (0..corpus.qa.len()).collect();
        let mut state = TrainState::new(model, all.len());
        train_run(&mut state, &corpus.documents, &corpus.qa, &all, &[], |_| {})
            .map_err(|e| e.to_string())?;
        let model = &state.model;

        let mut bank = new_bank(model).map_err(|e| e.to_string())?;
        for doc in &corpus.documents {
            memorize(model, &mut bank, doc).map_err(|e| e.to_string())?;
        }
        let golds: Vec<String> = corpus.qa.iter().map(|r| r.answer.clone()).collect();
        let with_bank: Vec<String> = corpus
            .qa
            .iter()
            .map(|r| answer(model, &bank, &r.question))
            .collect::<mbc::Result<_>>()
            .map_err(|e| e.to_string())?;
        let without: Vec<String> = corpus
            .qa
            .iter()
            .map(|r| answer_without_memory(model, &r.question))
            .collect::<mbc::Result<_>>()
            .map_err(|e| e.to_string())?;
        let em_bank = exact_match(&with_bank, &golds).map_err(|e| e.to_string())?;
        let em_empty = exact_match(&without, &golds).map_err(|e| e.to_string())?;
        expect!(
            em_bank - em_empty >= 0.3,
            "EM gap {:.3} < 0.3 (bank {em_bank:.3}, emptied {em_empty:.3})",
            em_bank - em_empty
        );
        Ok(())
    })());
}

// 8. Aggregation is bit-invariant to entry order, hierarchical one-pass
// equals flat, and the grouped schedule equals a staged replay.
#[test]
fn aggregation_invariants() {
    report(8, "aggregation-invariants", (|| -> Check {
        let cfg = tiny_cfg(801);
        let corpus = gen_synthetic(4, 801);
        let model = Model::new(cfg.clone(), full_vocab(&corpus)).map_err(|e| e.to_string())?;
        let mut rng = ModelRng::new(802);
        let t = cfg.aggregator.tokens;
        let d = cfg.aggregator.dim;
        let bank: Vec<Tensor> =
            (0..16).map(|_| rng.uniform_tensor(t, d, -1.0, 1.0)).collect();
        let query = rng.uniform_tensor(3, d, -1.0, 1.0);

        let flat = |order: &[usize]| -> mbc::Result<Vec<u64>> {
            let mut g = Graph::new();
            let q = g.leaf(query.clone(), false);
            let entries: Vec<Var> =
                order.iter().map(|&i| g.leaf(bank[i].clone(), false)).collect();
            let out = aggregate(&mut g, &model.store, &cfg.aggregator, q, &entries)?;
            Ok(g.value(out).data().iter().map(|x| x.to_bits()).collect())
        };
        let mut order: Vec<usize> = (0..16).collect();
        let reference = flat(&order).map_err(|e| e.to_string())?;
        for p in 0..100 {
            rng.shuffle(&mut order);
            let shuffled = flat(&order).map_err(|e| e.to_string())?;
            expect!(shuffled == reference, "permutation {p} changed the aggregate");
        }

        // one-pass hierarchical (M >= n) == flat
        let mut wide = cfg.aggregator.clone();
        wide.group_size = 16;
        let mut g = Graph::new();
        let q = g.leaf(query.clone(), false);
        let entries: Vec<Var> = bank.iter().map(|e| g.leaf(e.clone(), false)).collect();
        let (out, stats) = hierarchical_aggregate(&mut g, &model.store, &wide, q, &entries)
            .map_err(|e| e.to_string())?;
        let bits: Vec<u64> = g.value(out).data().iter().map(|x| x.to_bits()).collect();
        expect!(stats.passes == 1, "expected one pass, got {}", stats.passes);
        expect!(bits == reference, "one-pass hierarchical differs from flat");

        // n=4, M=2 == staged replay: summarize pairs, then the summaries
        let mut narrow = cfg.aggregator.clone();
        narrow.group_size = 2;
        let mut g = Graph::new();
        let q = g.leaf(query.clone(), false);
        let entries: Vec<Var> = bank[..4].iter().map(|e| g.leaf(e.clone(), false)).collect();
        let (out, stats) = hierarchical_aggregate(&mut g, &model.store, &narrow, q, &entries)
            .map_err(|e| e.to_string())?;
        let grouped: Vec<u64> = g.value(out).data().iter().map(|x| x.to_bits()).collect();
        expect!(stats.levels == 2, "expected two levels, got {}", stats.levels);

        let mut g = Graph::new();
        let q = g.leaf(query.clone(), false);
        let entries: Vec<Var> = bank[..4].iter().map(|e| g.leaf(e.clone(), false)).collect();
        let s0 = aggregate(&mut g, &model.store, &narrow, q, &entries[..2])
            .map_err(|e| e.to_string())?;
        let s1 = aggregate(&mut g, &model.store, &narrow, q, &entries[2..])
            .map_err(|e| e.to_string())?;
        let staged = aggregate(&mut g, &model.store, &narrow, q, &[s0, s1])
            .map_err(|e| e.to_string())?;
        let staged: Vec<u64> = g.value(staged).data().iter().map(|x| x.to_bits()).collect();
        expect!(staged == grouped, "grouped schedule differs from the staged replay");
        Ok(())
    })());
}

// 9. Adaptation is gradient-free: the global parameter hash is identical
// before and after memorizing 1,665 documents and answering 100 queries.
#[test]
fn adaptation_touches_nothing() {
    report(9, "adaptation-touches-nothing", (|| -> Check {
        let corpus = gen_synthetic(1665, 901);
        let mut cfg = tiny_cfg(901);
        cfg.encoder.vocab_size = 2048;
        cfg.decoder.vocab_size = 2048;
        let model = Model::new(cfg, full_vocab(&corpus)).map_err(|e| e.to_string())?;
        let before = model.param_hash();

        let mut bank = new_bank(&model).map_err(|e| e.to_string())?;
        for doc in &corpus.documents {
            memorize(&model, &mut bank, doc).map_err(|e| e.to_string())?;
        }
        expect!(bank.len() == 1665, "bank holds {} documents", bank.len());
        for rec in corpus.qa.iter().take(100) {
            answer(&model, &bank, &rec.question).map_err(|e| e.to_string())?;
        }
        expect!(model.param_hash() == before, "parameter hash changed during adaptation");
        Ok(())
    })());
}

// 10. Metric fixtures: normalization (case, punctuation, articles,
// whitespace, empties) and multiset-overlap F1, exactly.
#[test]
fn metric_fixtures() {
    report(10, "metric-fixtures", (|| -> Check {
        // (prediction, gold, exact match, F1 as (overlap, pred_len, gold_len);
        // None encodes the empty/no-overlap special cases below)
        let f1_of = |overlap: usize, np: usize, ng: usize| -> f64 {
            let p = overlap as f64 / np as f64;
            let r = overlap as f64 / ng as f64;
            2.0 * p * r / (p + r)
        };
        let cases: [(&str, &str, bool, Option<(usize, usize, usize)>, f64); 20] = [
            ("Paris", "paris", true, Some((1, 1, 1)), 0.0),
            ("the answer", "answer", true, Some((1, 1, 1)), 0.0),
            ("a cat.", "cat", true, Some((1, 1, 1)), 0.0),
            ("an apple", "apple", true, Some((1, 1, 1)), 0.0),
            ("  spaced \t out ", "spaced out", true, Some((2, 2, 2)), 0.0),
            ("New York City", "New York", false, Some((2, 3, 2)), 0.0),
            ("york new", "new york", false, Some((2, 2, 2)), 0.0),
            ("don't", "dont", true, Some((1, 1, 1)), 0.0),
            ("An answer, really.", "answer really", true, Some((2, 2, 2)), 0.0),
            ("forty-two", "fortytwo", true, Some((1, 1, 1)), 0.0),
            ("cat cat", "cat", false, Some((1, 2, 1)), 0.0),
            ("cat dog", "dog cat", false, Some((2, 2, 2)), 0.0),
            ("black cat", "black bird", false, Some((1, 2, 2)), 0.0),
            ("a b c d", "b d e", false, Some((2, 3, 3)), 0.0),
            ("42", "42", true, Some((1, 1, 1)), 0.0),
            ("", "", true, None, 1.0),
            ("", "cat", false, None, 0.0),
            ("cat", "", false, None, 0.0),
            ("the", "a", true, None, 1.0),
            ("dog", "cat", false, None, 0.0),
        ];
        for (i, (pred, gold, em, overlap, fallback)) in cases.iter().enumerate() {
            let got_em = normalize_answer(pred) == normalize_answer(gold);
            expect!(got_em == *em, "case {i} ({pred:?} vs {gold:?}): EM {got_em}, want {em}");
            let want_f1 = match overlap {
                Some((o, np, ng)) => f1_of(*o, *np, *ng),
                None => *fallback,
            };
            let got_f1 = token_f1(pred, gold);
            expect!(
                got_f1 == want_f1,
                "case {i} ({pred:?} vs {gold:?}): F1 {got_f1} != {want_f1}"
            );
        }
        // the aggregate scorers agree with per-case values
        let preds: Vec<String> = vec!["Paris".into(), "".into()];
        let golds: Vec<String> = vec!["paris".into(), "cat".into()];
        expect!(
            exact_match(&preds, &golds).map_err(|e| e.to_string())? == 0.5,
            "aggregate EM mismatch"
        );
        expect!(
            adaptation::mean_token_f1(&preds, &golds).map_err(|e| e.to_string())? == 0.5,
            "aggregate F1 mismatch"
        );
        Ok(())
    })());
}

// 11. Retention harness: first-milestone retention is exactly 100, every
// milestone reports a finite value, and the footprint column reproduces
// the analytic model bit-for-bit.
#[test]
fn retention_harness() {
    report(11, "retention-harness", (|| -> Check {
        let corpus = gen_synthetic(1600, 1101);
        let mut cfg = RunConfig::toy_default();
        cfg.seed = 1101;
        cfg.encoder.vocab_size = 2048;
        cfg.encoder.embed_dim = 32;
        cfg.encoder.num_blocks = 2;
        cfg.encoder.num_heads = 4;
        cfg.encoder.max_sequence_length = 32;
        cfg.encoder.output_tokens = 8;
        cfg.aggregator.dim = 32;
        cfg.aggregator.tokens = 8;
        cfg.aggregator.num_blocks = 3;
        cfg.aggregator.num_heads = 4;
        cfg.aggregator.group_size = 1600;
        cfg.decoder.vocab_size = 2048;
        cfg.decoder.embed_dim = 32;
        cfg.decoder.num_layers = 3;
        cfg.decoder.num_heads = 4;
        cfg.decoder.max_sequence_length = 32;
        cfg.quantizer.n_codes = 64;
        cfg.training.epochs = 25;
        cfg.training.batch_size = 8;

        // adapt-time queries must start above zero F1, so pre-train on the
        // first chunk's facts
        let model = Model::new(cfg, full_vocab(&corpus)).map_err(|e| e.to_string())?;
        let first_chunk: Vec<usize> = (0..200).collect();
        let mut state = TrainState::new(model, first_chunk.len());
        train_run(&mut state, &corpus.documents, &corpus.qa, &first_chunk, &[], |_| {})
            .map_err(|e| e.to_string())?;
        let model = &state.model;

        let report = retention_experiment(model, &corpus.documents, &corpus.qa, 200, 1600, 8)
            .map_err(|e| e.to_string())?;
        expect!(report.milestones.len() == 8, "{} milestones", report.milestones.len());
        let first = &report.milestones[0];
        expect!(first.milestone == 200, "first milestone at {}", first.milestone);
        expect!(
            first.retention_pct == Some(100.0),
            "first-milestone retention {:?} != 100.0",
            first.retention_pct
        );
        for m in &report.milestones {
            let r = m
                .retention_pct
                .ok_or_else(|| format!("retention undefined at milestone {}", m.milestone))?;
            expect!(r.is_finite(), "retention at milestone {} is not finite", m.milestone);
            expect!(m.f1.is_finite(), "F1 at milestone {} is not finite", m.milestone);
            let analytic = adaptation::footprint_model(64, 32, 8, m.docs).compressed_mb;
            expect!(
                m.footprint_mb == analytic,
                "footprint at milestone {}: {} != analytic {}",
                m.milestone,
                m.footprint_mb,
                analytic
            );
        }
        Ok(())
    })());
}
