//! Experiment harness over the span-NER library: corpus synthesis,
//! subsampling, statistics, training, evaluation, gradient checks and
//! the analysis tables, each run leaving a manifest beside its outputs.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or config error,
//! 3 I/O error.

mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use nestner::corpus::{
    class_stats, load_jsonl, subsample, synthesize, write_jsonl, Corpus, CorpusError, SynthConfig,
};
use nestner::losses::{EmcForm, LossError};
use nestner::scorer::{load_file_vectors, EmbeddingSource, ScorerError};
use nestner::sweep::{lowresource_sweep, ImbalanceReport, SweepError, DEFAULT_FRACTIONS};
use nestner::trainer::{
    evaluate_checkpoint, loss_breakdowns, train, train_with_source, Checkpoint, TrainConfig,
    TrainError,
};

use manifest::{out_file, write_json, write_text, RunManifest};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input data (exit 2).
    Usage(String),
    /// A verification failed (exit 1).
    Check(String),
    /// Filesystem trouble (exit 3).
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io(io) => CliError::Io(io.to_string()),
            TrainError::NonFiniteLoss { .. } => CliError::Check(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<ScorerError> for CliError {
    fn from(e: ScorerError) -> Self {
        match e {
            ScorerError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Train(t) => t.into(),
            SweepError::Corpus(c) => c.into(),
        }
    }
}

/// JSON config file: `{"synth": {...}, "train": {...}}`, both optional.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    synth: SynthConfig,
    train: TrainConfig,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON config file; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Combined-loss weight in [0, 1]
    #[arg(long)]
    beta: Option<f64>,
    /// Decoding threshold
    #[arg(long)]
    threshold: Option<f64>,
    /// Imbalance-loss form: product | additive
    #[arg(long)]
    emc_form: Option<String>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<FileConfig, CliError> {
        let mut cfg: FileConfig = match &self.config {
            Some(path) => {
                let body = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
                serde_json::from_str(&body)
                    .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(beta) = self.beta {
            cfg.train.beta = beta;
        }
        if let Some(threshold) = self.threshold {
            cfg.train.threshold = threshold;
        }
        if let Some(form) = &self.emc_form {
            cfg.train.emc_form = EmcForm::from_str(form).map_err(CliError::Usage)?;
        }
        Ok(cfg)
    }
}

fn config_value(cfg: &FileConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

#[derive(Parser)]
#[command(name = "nestner", version, about = "Span-based nested NER experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus split 80/10/10 into train/dev/test
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Uniformly subsample whole sentences from a corpus
    Subsample {
        #[command(flatten)]
        common: CommonArgs,
        /// Input corpus (JSONL)
        #[arg(long)]
        data: PathBuf,
        /// Fraction of sentences to keep, in (0, 1]
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class counts, ratios and length histograms
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and keep the best dev-F1 checkpoint
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Fixed per-sentence vectors (JSONL); trains heads only
        #[arg(long)]
        vectors: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode and score a checkpoint on a corpus
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Fixed per-sentence vectors for external-embedding checkpoints
        #[arg(long)]
        vectors: Option<PathBuf>,
        /// Also write per-sentence box-loss components (breakdown.jsonl)
        #[arg(long)]
        dump_breakdown: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against central finite differences
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of seeded random instances
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per training-set fraction and tabulate test F1
    SweepLowresource {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Comma-separated fractions in (0, 1]
        #[arg(long)]
        fractions: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class F1 table sorted by gold ratio, plus boundary and all rows
    ReportImbalance {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { common, out } => cmd_synth(&common, &out),
        Command::Subsample {
            common,
            data,
            fraction,
            out,
        } => cmd_subsample(&common, &data, fraction, &out),
        Command::Stats { data, out } => cmd_stats(&data, &out),
        Command::Train {
            common,
            train,
            dev,
            vectors,
            out,
        } => cmd_train(&common, &train, &dev, vectors.as_deref(), &out),
        Command::Eval {
            common,
            checkpoint,
            data,
            vectors,
            dump_breakdown,
            out,
        } => cmd_eval(
            &common,
            &checkpoint,
            &data,
            vectors.as_deref(),
            dump_breakdown,
            &out,
        ),
        Command::Gradcheck {
            common,
            instances,
            out,
        } => cmd_gradcheck(&common, instances, &out),
        Command::SweepLowresource {
            common,
            train,
            dev,
            test,
            fractions,
            out,
        } => cmd_sweep(&common, &train, &dev, &test, fractions.as_deref(), &out),
        Command::ReportImbalance {
            common,
            checkpoint,
            data,
            out,
        } => cmd_report_imbalance(&common, &checkpoint, &data, &out),
    }
}

fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    load_jsonl(path).map_err(|e| match e {
        CorpusError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })
}

fn cmd_synth(common: &CommonArgs, out: &Path) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    let corpus = synthesize(&cfg.synth)?;
    let mut manifest = RunManifest::start("synth", config_value(&cfg), vec![cfg.synth.seed]);

    // seeded shuffle, then 10% dev, 10% test, remainder to train
    let n = corpus.sentences.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.synth.seed ^ 0x53504c49);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let dev_n = n / 10;
    let test_n = n / 10;
    let train_n = n - dev_n - test_n;
    let slice = |range: std::ops::Range<usize>| Corpus {
        sentences: range.map(|i| corpus.sentences[order[i]].clone()).collect(),
        labels: corpus.labels.clone(),
    };
    for (name, split) in [
        ("train.jsonl", slice(0..train_n)),
        ("dev.jsonl", slice(train_n..train_n + dev_n)),
        ("test.jsonl", slice(train_n + dev_n..n)),
    ] {
        let path = out_file(out, name)?;
        write_jsonl(&split, &path)?;
        manifest.record_output(&path);
        println!(
            "{}: {} sentences, {} entities",
            name,
            split.sentences.len(),
            split.entity_count()
        );
    }
    manifest.finish(out)
}

fn cmd_subsample(
    common: &CommonArgs,
    data: &Path,
    fraction: f64,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    let corpus = load_corpus(data)?;
    let sub = subsample(&corpus, fraction, cfg.train.seed)?;
    let mut manifest = RunManifest::start(
        "subsample",
        serde_json::json!({"fraction": fraction, "seed": cfg.train.seed}),
        vec![cfg.train.seed],
    );
    manifest.record_input(data)?;
    let path = out_file(out, "subsample.jsonl")?;
    write_jsonl(&sub, &path)?;
    manifest.record_output(&path);
    println!(
        "kept {} of {} sentences",
        sub.sentences.len(),
        corpus.sentences.len()
    );
    manifest.finish(out)
}

fn cmd_stats(data: &Path, out: &Path) -> Result<(), CliError> {
    let corpus = load_corpus(data)?;
    let stats = class_stats(&corpus);
    let mut manifest = RunManifest::start("stats", serde_json::Value::Null, vec![]);
    manifest.record_input(data)?;
    let tsv = out_file(out, "stats.tsv")?;
    write_text(&tsv, &stats.to_tsv())?;
    manifest.record_output(&tsv);
    let hist = out_file(out, "histograms.json")?;
    write_json(&hist, &stats)?;
    manifest.record_output(&hist);
    print!("{}", stats.to_tsv());
    println!(
        "sentences\t{}\nentities\t{}",
        stats.sentence_count, stats.entity_count
    );
    manifest.finish(out)
}

fn cmd_train(
    common: &CommonArgs,
    train_path: &Path,
    dev_path: &Path,
    vectors: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    let train_corpus = load_corpus(train_path)?;
    let dev_corpus = load_corpus(dev_path)?;
    let mut manifest = RunManifest::start("train", config_value(&cfg), vec![cfg.train.seed]);
    manifest.record_input(train_path)?;
    manifest.record_input(dev_path)?;

    let (checkpoint, history) = match vectors {
        Some(vec_path) => {
            manifest.record_input(vec_path)?;
            let by_id = load_file_vectors(vec_path, cfg.train.embed_dim)?;
            let source = EmbeddingSource::FileVectors {
                dim: cfg.train.embed_dim,
                by_id,
            };
            train_with_source(&train_corpus, &dev_corpus, &cfg.train, source)?
        }
        None => train(&train_corpus, &dev_corpus, &cfg.train)?,
    };

    let ckpt_path = out_file(out, "checkpoint.json")?;
    checkpoint.save(&ckpt_path)?;
    manifest.record_output(&ckpt_path);
    let hist_path = out_file(out, "history.jsonl")?;
    write_text(&hist_path, &history.to_jsonl())?;
    manifest.record_output(&hist_path);
    if let Some(report) = &checkpoint.dev_metrics {
        let report_path = out_file(out, "report.json")?;
        write_json(&report_path, report)?;
        manifest.record_output(&report_path);
        println!(
            "best epoch {}: dev F1 {:.4} (boundary {:.4})",
            checkpoint.epoch, report.f1, report.boundary_f1
        );
    } else {
        println!("no epochs ran; wrote the untrained checkpoint");
    }
    manifest.finish(out)
}

fn cmd_eval(
    common: &CommonArgs,
    ckpt_path: &Path,
    data: &Path,
    vectors: Option<&Path>,
    dump_breakdown: bool,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    let checkpoint = Checkpoint::load(ckpt_path)?;
    let corpus = load_corpus(data)?;
    let threshold = common.threshold.unwrap_or(checkpoint.config.threshold);
    let mut manifest = RunManifest::start(
        "eval",
        serde_json::json!({"threshold": threshold, "config": config_value(&cfg)}),
        vec![],
    );
    manifest.record_input(ckpt_path)?;
    manifest.record_input(data)?;
    let loaded_vectors = match vectors {
        Some(path) => {
            manifest.record_input(path)?;
            Some(load_file_vectors(path, checkpoint.embed_dim)?)
        }
        None => None,
    };
    let report = evaluate_checkpoint(&checkpoint, &corpus, threshold, loaded_vectors.clone())?;
    let json_path = out_file(out, "report.json")?;
    write_json(&json_path, &report)?;
    manifest.record_output(&json_path);
    let txt_path = out_file(out, "report.txt")?;
    write_text(&txt_path, &report.to_text())?;
    manifest.record_output(&txt_path);
    if dump_breakdown {
        let model = checkpoint.to_model(loaded_vectors)?;
        let breakdowns = loss_breakdowns(&model, &corpus)?;
        let mut body = String::new();
        for record in &breakdowns {
            body.push_str(&serde_json::to_string(record).expect("serialize breakdown"));
            body.push('\n');
        }
        let path = out_file(out, "breakdown.jsonl")?;
        write_text(&path, &body)?;
        manifest.record_output(&path);
    }
    print!("{}", report.to_text());
    manifest.finish(out)
}

fn cmd_gradcheck(common: &CommonArgs, instances: usize, out: &Path) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    let seed = cfg.train.seed;
    let report = nestner::gradcheck::run(instances, seed);
    let mut manifest = RunManifest::start(
        "gradcheck",
        serde_json::json!({"instances": instances, "seed": seed}),
        vec![seed],
    );
    for component in &report.components {
        println!(
            "{:<14} worst rel err {:.3e}  (seed {})  {}",
            component.name,
            component.worst_rel_err,
            component.worst_seed,
            if component.passed() { "ok" } else { "FAIL" }
        );
    }
    let path = out_file(out, "gradcheck.json")?;
    write_json(&path, &report)?;
    manifest.record_output(&path);
    manifest.finish(out)?;
    if report.passed() {
        println!("all gradients within {:.0e}", nestner::gradcheck::TOLERANCE);
        Ok(())
    } else {
        let offender = report
            .components
            .iter()
            .filter(|c| !c.passed())
            .map(|c| format!("{} at seed {}", c.name, c.worst_seed))
            .collect::<Vec<_>>()
            .join(", ");
        Err(CliError::Check(format!(
            "gradient check failed: {offender}"
        )))
    }
}

fn parse_fractions(arg: Option<&str>) -> Result<Vec<f64>, CliError> {
    let fractions: Vec<f64> = match arg {
        None => DEFAULT_FRACTIONS.to_vec(),
        Some(list) => list
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| CliError::Usage(format!("bad fraction {p:?}: {e}")))
            })
            .collect::<Result<_, _>>()?,
    };
    for &f in &fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(CliError::Usage(format!("fraction {f} outside (0, 1]")));
        }
    }
    Ok(fractions)
}

fn cmd_sweep(
    common: &CommonArgs,
    train_path: &Path,
    dev_path: &Path,
    test_path: &Path,
    fractions_arg: Option<&str>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    let fractions = parse_fractions(fractions_arg)?;
    let train_corpus = load_corpus(train_path)?;
    let dev_corpus = load_corpus(dev_path)?;
    let test_corpus = load_corpus(test_path)?;
    let mut manifest = RunManifest::start(
        "sweep-lowresource",
        serde_json::json!({"fractions": fractions, "config": config_value(&cfg)}),
        vec![cfg.train.seed],
    );
    manifest.record_input(train_path)?;
    manifest.record_input(dev_path)?;
    manifest.record_input(test_path)?;

    let json_path = out_file(out, "sweep.json")?;
    // partial results are flushed after every fraction so an aborted
    // sweep still leaves the completed columns behind
    let sweep = lowresource_sweep(
        &train_corpus,
        &dev_corpus,
        &test_corpus,
        &fractions,
        &cfg.train,
        |partial| {
            let _ = write_json(&json_path, partial);
        },
    )?;
    write_json(&json_path, &sweep)?;
    manifest.record_output(&json_path);
    let txt_path = out_file(out, "sweep.txt")?;
    write_text(&txt_path, &sweep.to_text())?;
    manifest.record_output(&txt_path);
    print!("{}", sweep.to_text());
    manifest.finish(out)
}

fn cmd_report_imbalance(
    common: &CommonArgs,
    ckpt_path: &Path,
    data: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    let checkpoint = Checkpoint::load(ckpt_path)?;
    let corpus = load_corpus(data)?;
    let threshold = common.threshold.unwrap_or(checkpoint.config.threshold);
    let mut manifest = RunManifest::start(
        "report-imbalance",
        serde_json::json!({"threshold": threshold, "config": config_value(&cfg)}),
        vec![],
    );
    manifest.record_input(ckpt_path)?;
    manifest.record_input(data)?;
    let report = evaluate_checkpoint(&checkpoint, &corpus, threshold, None)?;
    let imbalance = ImbalanceReport::from_eval(report);
    let json_path = out_file(out, "imbalance.json")?;
    write_json(&json_path, &imbalance)?;
    manifest.record_output(&json_path);
    let txt_path = out_file(out, "imbalance.txt")?;
    write_text(&txt_path, &imbalance.to_text())?;
    manifest.record_output(&txt_path);
    print!("{}", imbalance.to_text());
    manifest.finish(out)
}
