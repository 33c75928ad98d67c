use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mbc::adaptation::{self, exact_match, mean_token_f1};
use mbc::config::RunConfig;
use mbc::corpus::{self, Document, QARecord};
use mbc::membank::{load_bank, save_bank, FootprintReport};
use mbc::training::{load_checkpoint, save_checkpoint, train_run, TrainState};

#[derive(Parser)]
#[command(name = "mbc", about = "Memory-bank compression: train, adapt, and inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Run configuration as canonical JSON; defaults to the toy config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train end to end on a dataset (or a generated synthetic corpus).
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Line-delimited JSON dataset; when absent a synthetic corpus is generated.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Synthetic corpus size when --data is absent.
        #[arg(long, default_value_t = 64)]
        docs: usize,
        /// Disable dead-code resetting.
        #[arg(long)]
        no_reset: bool,
    },
    /// Memorize a document stream with a trained checkpoint, then answer queries.
    Adapt {
        #[command(flatten)]
        common: CommonOpts,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Document stream to memorize (line-delimited JSON records).
        #[arg(long)]
        stream: PathBuf,
        /// Queries to answer after memorization; omit to only build the bank.
        #[arg(long)]
        qa: Option<PathBuf>,
        /// Hierarchical aggregation group size override.
        #[arg(long)]
        group_size: Option<usize>,
    },
    /// Score a checkpoint plus saved bank against a query file.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bank produced by `adapt`.
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        group_size: Option<usize>,
    },
    /// Footprint table: compressed vs continuous bank per document milestone.
    Bench {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 512)]
        n_codes: usize,
        #[arg(long, default_value_t = 768)]
        dim: usize,
        #[arg(long, default_value_t = 12)]
        tokens: usize,
        #[arg(long, default_value_t = 1600)]
        max_docs: usize,
        #[arg(long, default_value_t = 200)]
        step: usize,
    },
    /// Usage histogram, perplexity, and dead-code count of a checkpoint's codebook.
    InspectCodebook {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate a deterministic synthetic fact corpus.
    GenCorpus {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 256)]
        docs: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Train { common, data, docs, no_reset } => cmd_train(common, data, docs, no_reset),
        Command::Adapt { common, checkpoint, stream, qa, group_size } => {
            cmd_adapt(common, &checkpoint, &stream, qa.as_deref(), group_size)
        }
        Command::Eval { common, checkpoint, bank, qa, group_size } => {
            cmd_eval(common, &checkpoint, &bank, &qa, group_size)
        }
        Command::Bench { common, n_codes, dim, tokens, max_docs, step } => {
            cmd_bench(common, n_codes, dim, tokens, max_docs, step)
        }
        Command::InspectCodebook { common, checkpoint } => {
            cmd_inspect_codebook(common, &checkpoint)
        }
        Command::GenCorpus { common, docs } => cmd_gen_corpus(common, docs),
    }
}

fn load_config(common: &CommonOpts) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::toy_default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ldjson_writer(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn cmd_train(
    common: CommonOpts,
    data: Option<PathBuf>,
    docs: usize,
    no_reset: bool,
) -> anyhow::Result<()> {
    let mut cfg = load_config(&common)?;
    if no_reset {
        cfg.training.reset_dead_codes = false;
    }

    let (documents, qa, train_idx, val_idx) = match data {
        Some(path) => {
            let (documents, qa) = corpus::load_qa(&path)?;
            // 90/10 split by record order; the file is the source of truth.
            let n = qa.len();
            let n_val = (n / 10).max(1).min(n.saturating_sub(1));
            let train_idx: Vec<usize> = (0..n - n_val).collect();
            let val_idx: Vec<usize> = (n - n_val..n).collect();
            (documents, qa, train_idx, val_idx)
        }
        None => {
            let synth = corpus::gen_synthetic(docs, cfg.seed);
            (synth.documents, synth.qa, synth.train, synth.val)
        }
    };

    let vocab_texts = train_idx.iter().flat_map(|&i| {
        let rec = &qa[i];
        let doc = documents.iter().find(|d| d.doc_id == rec.doc_id);
        doc.map(|d| d.text.as_str()).into_iter().chain([rec.question.as_str()])
    });
    let vocab = corpus::Vocabulary::build(vocab_texts);

    let model = mbc::model::Model::new(cfg, vocab)?;
    let mut state = TrainState::new(model, train_idx.len());

    let mut metrics_file = ldjson_writer(&common.out, "metrics.jsonl")?;
    let history = train_run(&mut state, &documents, &qa, &train_idx, &val_idx, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        println!(
            "epoch {:>3}  total {:.4}  qa {:.4}  vq {:.4}  ppl {:.2}  resets {}{}",
            m.epoch,
            m.mean_total,
            m.mean_qa,
            m.mean_vq,
            m.perplexity,
            m.resets,
            match (m.val_em, m.val_f1) {
                (Some(em), Some(f1)) => format!("  val_em {em:.3}  val_f1 {f1:.3}"),
                _ => String::new(),
            }
        );
        let _ = writeln!(metrics_file, "{line}");
    })?;
    metrics_file.flush()?;

    let ckpt = common.out.join("checkpoint.mbck");
    save_checkpoint(&state, &ckpt)?;
    println!(
        "trained {} epochs; best val EM {:.3}; checkpoint at {}",
        history.len(),
        state.best_em.max(0.0),
        ckpt.display()
    );
    Ok(())
}

fn read_documents(path: &Path) -> anyhow::Result<(Vec<Document>, Vec<QARecord>)> {
    Ok(corpus::load_qa(path)?)
}

fn answer_all(
    model: &mbc::model::Model,
    bank: &mbc::membank::CompressedMemoryBank,
    qa: &[QARecord],
    out: &Path,
) -> anyhow::Result<(Vec<String>, Vec<String>)> {
    let mut answers_file = ldjson_writer(out, "answers.jsonl")?;
    let mut preds = Vec::with_capacity(qa.len());
    let mut golds = Vec::with_capacity(qa.len());
    for rec in qa {
        let pred = adaptation::answer(model, bank, &rec.question)?;
        writeln!(
            answers_file,
            "{}",
            json!({"doc_id": rec.doc_id, "question": rec.question,
                   "prediction": pred, "gold": rec.answer})
        )?;
        preds.push(pred);
        golds.push(rec.answer.clone());
    }
    answers_file.flush()?;
    Ok((preds, golds))
}

fn cmd_adapt(
    common: CommonOpts,
    checkpoint: &Path,
    stream: &Path,
    qa: Option<&Path>,
    group_size: Option<usize>,
) -> anyhow::Result<()> {
    let mut state = load_checkpoint(checkpoint)?;
    if let Some(m) = group_size {
        state.model.cfg.aggregator.group_size = m;
        state.model.cfg.validate()?;
    }
    let model = &state.model;

    let (documents, _) = read_documents(stream)?;
    let mut bank = adaptation::new_bank(model)?;
    for doc in &documents {
        adaptation::memorize(model, &mut bank, doc)?;
    }
    fs::create_dir_all(&common.out)?;
    let bank_path = common.out.join("bank.mbcb");
    save_bank(&bank, &bank_path)?;

    let fp = bank.footprint();
    println!(
        "memorized {} documents; bank {:.4} MB (continuous equivalent {:.4} MB) at {}",
        bank.len(),
        fp.compressed_mb,
        fp.continuous_mb,
        bank_path.display()
    );

    let qa_records = match qa {
        Some(path) => read_documents(path)?.1,
        None => Vec::new(),
    };
    if qa_records.is_empty() {
        println!("no queries supplied; EM/F1 omitted");
        return Ok(());
    }
    let (preds, golds) = answer_all(model, &bank, &qa_records, &common.out)?;
    let em = exact_match(&preds, &golds)?;
    let f1 = mean_token_f1(&preds, &golds)?;
    println!("(EM, F1) = ({em:.4}, {f1:.4})");
    Ok(())
}

fn cmd_eval(
    common: CommonOpts,
    checkpoint: &Path,
    bank: &Path,
    qa: &Path,
    group_size: Option<usize>,
) -> anyhow::Result<()> {
    let mut state = load_checkpoint(checkpoint)?;
    if let Some(m) = group_size {
        state.model.cfg.aggregator.group_size = m;
        state.model.cfg.validate()?;
    }
    let bank = load_bank(bank)?;
    let (_, qa_records) = read_documents(qa)?;
    let (preds, golds) = answer_all(&state.model, &bank, &qa_records, &common.out)?;
    let em = exact_match(&preds, &golds)?;
    let f1 = mean_token_f1(&preds, &golds)?;
    println!("(EM, F1) = ({em:.4}, {f1:.4})");
    Ok(())
}

fn cmd_bench(
    common: CommonOpts,
    n_codes: usize,
    dim: usize,
    tokens: usize,
    max_docs: usize,
    step: usize,
) -> anyhow::Result<()> {
    anyhow::ensure!(step > 0, "--step must be positive");
    let mut file = ldjson_writer(&common.out, "footprint.jsonl")?;
    println!("{:>8}  {:>12}  {:>14}  {:>10}", "docs", "mbc_mb", "continuous_mb", "reduction%");
    let mut docs = 0;
    loop {
        let fp = FootprintReport::new(n_codes, dim, tokens, docs);
        writeln!(file, "{}", serde_json::to_string(&fp)?)?;
        println!(
            "{:>8}  {:>12.4}  {:>14.4}  {:>10.2}",
            docs, fp.compressed_mb, fp.continuous_mb, fp.reduction_pct
        );
        if docs >= max_docs {
            break;
        }
        docs += step;
    }
    file.flush()?;
    Ok(())
}

fn cmd_inspect_codebook(common: CommonOpts, checkpoint: &Path) -> anyhow::Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let cb = &state.model.codebook;
    let dead = cb.dead_codes();
    let ppl = cb.perplexity().ok();

    let mut file = ldjson_writer(&common.out, "codebook.jsonl")?;
    for (code, usage) in cb.usage.iter().enumerate() {
        writeln!(file, "{}", json!({"code": code, "usage": usage}))?;
    }
    file.flush()?;

    println!("codes: {}", cb.usage.len());
    println!("dead codes (usage < {:e}): {}", cb.epsilon, dead.len());
    match ppl {
        Some(p) => println!("usage perplexity: {p:.4}"),
        None => println!("usage perplexity: undefined (all-zero usage)"),
    }
    Ok(())
}

fn cmd_gen_corpus(common: CommonOpts, docs: usize) -> anyhow::Result<()> {
    anyhow::ensure!(docs >= 1, "--docs must be at least 1");
    let seed = common.seed.unwrap_or(0);
    let synth = corpus::gen_synthetic(docs, seed);
    fs::create_dir_all(&common.out)?;
    let path = common.out.join("corpus.jsonl");
    corpus::save_qa(&path, &synth.documents, &synth.qa)?;
    println!(
        "wrote {} records ({} train / {} val / {} test) to {}",
        synth.qa.len(),
        synth.train.len(),
        synth.val.len(),
        synth.test.len(),
        path.display()
    );
    Ok(())
}
