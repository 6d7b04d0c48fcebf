//! `seqmix` command-line entry point.
//!
//! Exit codes: 0 success, 1 unexpected failure (including output I/O),
//! 2 configuration or usage error, 3 data error, 4 training failure,
//! 5 oracle check verdict FAIL.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use seqmix::data::{
    build_vocab, gen_minigrammar, gen_reversal, load_dataset, make_primitive_split, split_validation, Dataset,
    VocabMode, Vocabulary,
};
use seqmix::mixer::{augment_batch, AugmentOptions, SequencePair};
use seqmix::model::{run_oracle_check, ModelParams};
use seqmix::trainer::{
    decode_all, evaluate_bleu, exact_match, init_params, run_experiment, strip_markers, train, ExperimentData,
    RunStreams, Validation,
};
use seqmix::{Error, Method};

use config::{Corpus, Overrides, RunConfig, Task};

#[derive(Parser)]
#[command(name = "seqmix", version, about = "Latent-mask sequence augmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load the dataset and write its splits and vocabulary.
    GenData(Flags),
    /// Write the augmented examples of the first training batches.
    AugmentDump(Flags),
    /// Train one model and save its checkpoint and metrics.
    Train(Flags),
    /// Evaluate a saved checkpoint on the test split.
    Eval(Flags),
    /// Train every (method, seed) cell and write the comparison table.
    Experiment(Flags),
    /// Check the hard-mixture objective against exact enumeration.
    OracleCheck(Flags),
}

#[derive(Args, Clone, Debug, Default)]
struct Flags {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// baseline, word-drop, switch-out, seqmix-hard or seqmix.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file (SCAN `IN: … OUT: …` lines or TSV).
    #[arg(long)]
    data: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    fn config(e: impl std::fmt::Display) -> Self {
        Failure::new(2, e.to_string())
    }

    fn data(e: impl std::fmt::Display) -> Self {
        Failure::new(3, e.to_string())
    }

    fn other(e: impl std::fmt::Display) -> Self {
        Failure::new(1, e.to_string())
    }

    /// Maps a library error raised while training.
    fn training(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::new(4, e.to_string()),
            Error::Parameter(_) | Error::TooLarge { .. } => Failure::config(e),
            Error::Parse { .. } | Error::EmptyDataset(_) => Failure::data(e),
            _ => Failure::new(4, e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (task, flags) = match cli.command {
        Command::GenData(f) => (Task::GenData, f),
        Command::AugmentDump(f) => (Task::AugmentDump, f),
        Command::Train(f) => (Task::Train, f),
        Command::Eval(f) => (Task::Eval, f),
        Command::Experiment(f) => (Task::Experiment, f),
        Command::OracleCheck(f) => (Task::OracleCheck, f),
    };
    match run(task, &flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(task: Task, flags: &Flags) -> Outcome {
    let file = match &flags.config {
        Some(p) => Some(config::read_file(p).map_err(Failure::config)?),
        None => None,
    };
    let overrides = Overrides {
        seed: flags.seed,
        method: flags.method.clone(),
        alpha: flags.alpha,
        eta: flags.eta,
        rho: flags.rho,
        out: flags.out.clone(),
        data: flags.data.clone(),
    };
    let cfg = config::resolve(file, task, &overrides).map_err(Failure::config)?;
    fs::create_dir_all(&cfg.out).map_err(|e| Failure::other(format!("{}: {e}", cfg.out.display())))?;
    let resolved = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
    write_atomic(&cfg.out.join(format!("resolved-{}.json", task.key())), resolved.as_bytes())?;
    match task {
        Task::GenData => cmd_gen_data(&cfg),
        Task::AugmentDump => cmd_augment_dump(&cfg),
        Task::Train => cmd_train(&cfg),
        Task::Eval => cmd_eval(&cfg),
        Task::Experiment => cmd_experiment(&cfg),
        Task::OracleCheck => cmd_oracle_check(&cfg),
    }
}

/// Writes through a temporary sibling and renames into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Outcome {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Failure::other(format!("{}: {e}", path.display())))
}

struct Prepared {
    full: Dataset,
    train: Dataset,
    valid: Dataset,
    test: Dataset,
    vocab: Vocabulary,
}

impl Prepared {
    fn encode(&self, d: &Dataset) -> Vec<SequencePair> {
        d.encode(&self.vocab, &self.vocab)
    }

    fn experiment_data(&self) -> ExperimentData {
        ExperimentData {
            train: self.encode(&self.train),
            valid: self.encode(&self.valid),
            test: self.encode(&self.test),
            vocab: self.vocab.len(),
        }
    }

    fn manifest(&self, cfg: &RunConfig) -> serde_json::Value {
        json!({
            "version": env!("CARGO_PKG_VERSION"),
            "task": cfg.task.key(),
            "dataset": self.full.name,
            "dataset_hash": format!("{:016x}", self.full.content_hash()),
            "examples": self.full.len(),
            "train": self.train.len(),
            "valid": self.valid.len(),
            "test": self.test.len(),
            "vocab": self.vocab.len(),
        })
    }
}

/// Loads or generates the corpus and applies the configured splits.
///
/// Without a held-out primitive the validation split doubles as the test set.
fn prepare(cfg: &RunConfig) -> Result<Prepared, Failure> {
    let full = match (&cfg.data, cfg.corpus) {
        (Some(p), _) => load_dataset(p).map_err(Failure::data)?,
        (None, Corpus::Minigrammar) => gen_minigrammar(&cfg.grammar),
        (None, Corpus::Reversal) => {
            let r = &cfg.reversal;
            gen_reversal(r.pairs, r.vocab, r.min_len, r.max_len, cfg.seed)
        }
    };
    if full.is_empty() {
        return Err(Failure::data(Error::EmptyDataset(full.name.clone())));
    }
    let (vocab, _) = build_vocab(&full, VocabMode::Shared).map_err(Failure::data)?;
    let mut rng = RunStreams::new(cfg.seed).data;
    let (train, valid, test) = match &cfg.held_out {
        Some(phrase) => {
            let (train_all, test) = make_primitive_split(&full, phrase).map_err(Failure::data)?;
            let (mut train, valid) =
                split_validation(&train_all, cfg.validation_fraction, &mut rng, |e| e.source_text() == *phrase);
            let isolated: Vec<_> = train.examples.iter().filter(|e| e.source_text() == *phrase).cloned().collect();
            for _ in 0..cfg.primitive_repeats {
                train.examples.extend(isolated.iter().cloned());
            }
            (train, valid, test)
        }
        None => {
            let (train, valid) = split_validation(&full, cfg.validation_fraction, &mut rng, |_| false);
            let test = valid.clone();
            (train, valid, test)
        }
    };
    if train.is_empty() {
        return Err(Failure::data(Error::EmptyDataset(train.name.clone())));
    }
    Ok(Prepared {
        full,
        train,
        valid,
        test,
        vocab,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("json serializes") + "\n";
    write_atomic(path, text.as_bytes())
}

fn cmd_gen_data(cfg: &RunConfig) -> Outcome {
    let p = prepare(cfg)?;
    write_atomic(&cfg.out.join("data.txt"), p.full.to_scan_text().as_bytes())?;
    write_atomic(&cfg.out.join("train.txt"), p.train.to_scan_text().as_bytes())?;
    write_atomic(&cfg.out.join("valid.txt"), p.valid.to_scan_text().as_bytes())?;
    write_atomic(&cfg.out.join("test.txt"), p.test.to_scan_text().as_bytes())?;
    write_atomic(&cfg.out.join("vocab.txt"), p.vocab.to_text().as_bytes())?;
    write_json(&cfg.out.join("manifest.json"), &p.manifest(cfg))?;
    println!(
        "{}: {} examples (train {}, valid {}, test {}), hash {:016x}",
        p.full.name,
        p.full.len(),
        p.train.len(),
        p.valid.len(),
        p.test.len(),
        p.full.content_hash()
    );
    Ok(())
}

fn cmd_augment_dump(cfg: &RunConfig) -> Outcome {
    let p = prepare(cfg)?;
    let train_pairs = p.encode(&p.train);
    let tc = cfg.train_config(cfg.method, cfg.seed);
    let streams = RunStreams::new(cfg.seed);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    streams.shuffle.split(1).shuffle(&mut order);
    let mut rng = streams.augment.clone();
    let opts = AugmentOptions {
        partner_mode: tc.partner_mode,
        force_lambda: tc.force_lambda,
    };
    let mut out = String::new();
    let mut count = 0;
    for chunk in order.chunks(tc.batch_size).take(cfg.dump_batches) {
        let batch: Vec<(usize, &SequencePair)> = chunk.iter().map(|&i| (i, &train_pairs[i])).collect();
        let examples = if cfg.method == Method::Baseline {
            batch
                .iter()
                .map(|&(i, pair)| seqmix::MixedExample::identity(pair, i, Method::Baseline))
                .collect()
        } else {
            augment_batch(&tc.method, &batch, &train_pairs, p.vocab.len(), opts, &mut rng).map_err(Failure::config)?
        };
        for e in &examples {
            out.push_str(&e.to_dump_line());
            out.push('\n');
            count += 1;
        }
    }
    write_atomic(&cfg.out.join("augment.tsv"), out.as_bytes())?;
    write_atomic(&cfg.out.join("vocab.txt"), p.vocab.to_text().as_bytes())?;
    println!("wrote {count} {} examples to {}", cfg.method.key(), cfg.out.join("augment.tsv").display());
    Ok(())
}

fn metrics_text(records: &[seqmix::trainer::MetricsRecord]) -> String {
    records.iter().map(|r| r.to_json_line() + "\n").collect()
}

fn score(params: &ModelParams, data: &[SequencePair], cfg: &RunConfig) -> Result<(f64, Option<f64>), Failure> {
    let hyps = decode_all(params, data, cfg.max_decode_len).map_err(Failure::other)?;
    let refs: Vec<Vec<usize>> = data.iter().map(|p| strip_markers(&p.target)).collect();
    let bleu = if cfg.report_bleu && !refs.is_empty() {
        Some(evaluate_bleu(&hyps, &refs).map_err(Failure::other)?)
    } else {
        None
    };
    Ok((exact_match(&hyps, &refs), bleu))
}

fn cmd_train(cfg: &RunConfig) -> Outcome {
    let p = prepare(cfg)?;
    write_json(&cfg.out.join("manifest.json"), &p.manifest(cfg))?;
    let d = p.experiment_data();
    let tc = cfg.train_config(cfg.method, cfg.seed);
    let mut params = init_params(&tc, d.vocab);
    let valid = (!d.valid.is_empty()).then_some(Validation { data: &d.valid });
    let records = train(&mut params, &d.train, d.vocab, &tc, valid, |r| {
        log::info!("epoch {} loss {:.5} exact_match {:?}", r.epoch, r.loss, r.exact_match)
    })
    .map_err(Failure::training)?;
    write_atomic(&cfg.out.join("metrics.jsonl"), metrics_text(&records).as_bytes())?;
    write_atomic(&cfg.out.join("model.ckpt"), &params.to_checkpoint_bytes())?;
    write_atomic(&cfg.out.join("vocab.txt"), p.vocab.to_text().as_bytes())?;
    let (em, bleu) = score(&params, &d.test, cfg)?;
    write_json(&cfg.out.join("result.json"), &json!({"test_exact_match": em, "test_bleu": bleu}))?;
    println!("{} seed {}: test exact match {:.4}", cfg.method.key(), cfg.seed, em);
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Outcome {
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.ckpt"));
    let params = ModelParams::load(&ckpt).map_err(Failure::data)?;
    let vocab_path = ckpt.with_file_name("vocab.txt");
    let text = fs::read_to_string(&vocab_path).map_err(|e| Failure::data(format!("{}: {e}", vocab_path.display())))?;
    let saved_vocab = Vocabulary::from_text(&text).map_err(Failure::data)?;
    let p = prepare(cfg)?;
    if saved_vocab != p.vocab || params.dims.vocab != p.vocab.len() {
        return Err(Failure::data("checkpoint vocabulary does not match the dataset"));
    }
    let test = p.encode(&p.test);
    let (em, bleu) = score(&params, &test, cfg)?;
    write_json(
        &cfg.out.join("eval.json"),
        &json!({"checkpoint": ckpt, "examples": test.len(), "exact_match": em, "bleu": bleu}),
    )?;
    println!("exact match {em:.4} on {} examples", test.len());
    if let Some(b) = bleu {
        println!("BLEU {b:.4}");
    }
    Ok(())
}

fn cmd_experiment(cfg: &RunConfig) -> Outcome {
    let p = prepare(cfg)?;
    write_json(&cfg.out.join("manifest.json"), &p.manifest(cfg))?;
    let data = p.experiment_data();
    let cells: Vec<_> = cfg
        .methods
        .iter()
        .flat_map(|&m| (0..cfg.seeds as u64).map(move |k| (m, k)))
        .map(|(m, k)| cfg.train_config(m, cfg.seed + k))
        .collect();
    let report = run_experiment(&cells, &data).map_err(Failure::config)?;
    let logs = cfg.out.join("logs");
    fs::create_dir_all(&logs).map_err(|e| Failure::other(format!("{}: {e}", logs.display())))?;
    for c in &report.cells {
        let name = format!("{}-seed{}.jsonl", c.method.key(), c.seed);
        write_atomic(&logs.join(name), metrics_text(&c.records).as_bytes())?;
    }
    let cells_json: Vec<_> = report
        .cells
        .iter()
        .map(|c| {
            json!({
                "method": c.method.key(),
                "seed": c.seed,
                "test_exact_match": c.test_exact_match,
                "test_bleu": c.test_bleu,
                "failure": c.failure,
            })
        })
        .collect();
    write_json(&cfg.out.join("cells.json"), &serde_json::Value::Array(cells_json))?;
    write_atomic(&cfg.out.join("report.tsv"), report.to_tsv().as_bytes())?;
    let table = report.to_table();
    write_atomic(&cfg.out.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    let failed: Vec<String> = report
        .cells
        .iter()
        .filter_map(|c| c.failure.as_ref().map(|f| format!("{} seed {}: {f}", c.method.key(), c.seed)))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(4, format!("{} cell(s) failed:\n  {}", failed.len(), failed.join("\n  "))))
    }
}

fn cmd_oracle_check(cfg: &RunConfig) -> Outcome {
    let report = run_oracle_check(&cfg.oracle_config()).map_err(Failure::config)?;
    write_atomic(&cfg.out.join("oracle.tsv"), report.to_tsv().as_bytes())?;
    let verdict = report.verdict();
    write_atomic(&cfg.out.join("verdict.txt"), format!("{verdict}\n").as_bytes())?;
    println!("{verdict}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::new(5, "oracle check failed"))
    }
}
