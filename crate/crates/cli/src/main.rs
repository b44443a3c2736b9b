//! `frgcf` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data or checkpoint
//! incompatibility (including unreadable inputs), 3 numeric failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use frgcf::dataset::{
    load_interactions, partition_by_feedback, split_train_test, Comparison, Delimiter, Edge, IdMap, InteractionDataset,
    PartitionRule,
};
use frgcf::evaluation::{evaluate, rank_for, ExclusionPolicy, MetricsReport, Relevance, DEFAULT_N};
use frgcf::trainer::{Checkpoint, LogRecord, ModelKind, RecordKind, TrainConfig, Trainer};
use frgcf::Error;
use serde::Serialize;

const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Parser)]
#[command(name = "frgcf", version, about = "Two-view graph collaborative filtering over fascinated and unfascinated feedback")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Single-threaded run; overrides --threads.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleKind {
    Rating,
    Completion,
    Dwell,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Lightgcn,
    LightgcnIf,
}

#[derive(Subcommand)]
enum Command {
    /// Split a raw interaction log into I&F / I&U train and test edges.
    #[command(group(ArgGroup::new("cmp").args(["geq", "gt"])))]
    Partition {
        /// Log with `user item feedback [timestamp]` records.
        input: PathBuf,
        /// tab, comma, whitespace, or a literal separator such as `::`.
        #[arg(long, default_value = "tab")]
        delimiter: String,
        #[arg(long, value_enum, default_value = "rating")]
        kind: RuleKind,
        /// Required for completion and dwell; ratings default to 4.
        #[arg(long)]
        threshold: Option<f64>,
        /// Fascinated when feedback >= threshold.
        #[arg(long)]
        geq: bool,
        /// Fascinated when feedback > threshold.
        #[arg(long)]
        gt: bool,
        /// Fraction of each user's edges kept for training.
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint, logs and test metrics.
    Train {
        /// `key = value` config file; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. `--set lr=0.01`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Full-ranking evaluation of a checkpoint on the test edges.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
        /// Headline relevance: if, iu or all.
        #[arg(long, default_value = "if")]
        relevant: String,
        /// Train edges masked from rankings: both, if or none.
        #[arg(long, default_value = "both")]
        exclude: String,
        /// Directory for evaluation.json and evaluation.csv; defaults to the
        /// checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the top-n items for one user as `item<TAB>score`.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// External user id.
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value = "both")]
        exclude: String,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(msg),
            Error::NonFinite { .. } | Error::Asymmetric { .. } => Failure::Numeric(msg),
            _ => Failure::Data(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(format!("json error: {e}"))
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let threads = if cli.strict { 1 } else { cli.threads };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }

    let outcome = match cli.command {
        Command::Partition { input, delimiter, kind, threshold, geq, gt, ratio, seed, out } => {
            cmd_partition(&input, &delimiter, kind, threshold, geq, gt, ratio, seed, &out)
        }
        Command::Train { config, data, out, overrides, baseline } => {
            cmd_train(config.as_deref(), &data, &out, &overrides, baseline, cli.strict)
        }
        Command::Evaluate { checkpoint, data, n, relevant, exclude, out } => {
            cmd_evaluate(&checkpoint, &data, n, &relevant, &exclude, out.as_deref())
        }
        Command::Recommend { checkpoint, data, user, n, exclude } => cmd_recommend(&checkpoint, &data, &user, n, &exclude),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn parse_arg<T: std::str::FromStr<Err = Error>>(value: &str) -> Result<T, Failure> {
    value.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

fn write_edges(path: &Path, edges: &[Edge], users: &IdMap, items: &IdMap) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &(u, i) in edges {
        writeln!(w, "{}\t{}", users.external(u).unwrap_or("?"), items.external(i).unwrap_or("?"))?;
    }
    w.flush()
}

#[allow(clippy::too_many_arguments)]
fn cmd_partition(
    input: &Path,
    delimiter: &str,
    kind: RuleKind,
    threshold: Option<f64>,
    geq: bool,
    gt: bool,
    ratio: f64,
    seed: u64,
    out: &Path,
) -> CmdResult {
    let delimiter: Delimiter = parse_arg(delimiter)?;
    let mut rule = match (kind, threshold) {
        (RuleKind::Rating, t) => PartitionRule::rating(t.unwrap_or(4.0)),
        (RuleKind::Completion, Some(t)) => PartitionRule::completion(t),
        (RuleKind::Dwell, Some(t)) => PartitionRule::dwell(t),
        (_, None) => return Err(Failure::Usage("--threshold is required for completion and dwell rules".into())),
    };
    if !rule.threshold.is_finite() {
        return Err(Failure::Usage("threshold must be finite".into()));
    }
    if geq {
        rule.fascinated_if = Comparison::Geq;
    } else if gt {
        rule.fascinated_if = Comparison::Gt;
    }

    let raw = load_interactions(input, &delimiter)?;
    let parts = partition_by_feedback(&raw, &rule);
    let dataset = split_train_test(&parts, ratio, seed)?;
    let manifest = dataset.write_dir(out)?;
    write_edges(&out.join("fascinated.tsv"), &parts.if_edges, &parts.users, &parts.items)?;
    write_edges(&out.join("unfascinated.tsv"), &parts.iu_edges, &parts.users, &parts.items)?;

    println!("rule\t{rule}");
    println!("raw\t{}", parts.raw_count);
    println!("deduplicated\t{}", parts.dedup_count());
    println!("fascinated\t{}", parts.if_edges.len());
    println!("unfascinated\t{}", parts.iu_edges.len());
    println!("users\t{}", manifest.num_users);
    println!("items\t{}", manifest.num_items);
    println!("train_if\t{}\ttest_if\t{}", manifest.train_if, manifest.test_if);
    println!("train_iu\t{}\ttest_iu\t{}", manifest.train_iu, manifest.test_iu);
    println!("hash\t{}", manifest.hash);
    Ok(())
}

#[derive(Serialize)]
struct RunOutputs {
    config: String,
    log: String,
    checkpoint: String,
    metrics_json: String,
    metrics_csv: String,
}

/// Written once before training starts.
#[derive(Serialize)]
struct RunManifest {
    version: String,
    args: Vec<String>,
    model: String,
    config: String,
    config_hash: String,
    data_dir: String,
    dataset_hash: String,
    seed: u64,
    threads: usize,
    strict: bool,
    started_unix: u64,
    outputs: RunOutputs,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: String,
    failed_epoch: usize,
    last_record: Option<&'a LogRecord>,
    config: String,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> std::io::Result<()> {
    fs::write(dir.join(format!("{stem}.json")), report.to_json() + "\n")?;
    fs::write(dir.join(format!("{stem}.csv")), format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()))
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    overrides: &[String],
    baseline: Option<Baseline>,
    strict: bool,
) -> CmdResult {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p).map_err(|e| match e {
            Error::MissingFile(_) => Failure::Usage(e.to_string()),
            other => other.into(),
        })?,
        None => TrainConfig::default(),
    };
    if let Some(b) = baseline {
        cfg = cfg.for_model(match b {
            Baseline::Lightgcn => ModelKind::LightGcn,
            Baseline::LightgcnIf => ModelKind::LightGcnIf,
        });
    }
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;

    let dataset = InteractionDataset::read_dir(data)?;
    fs::create_dir_all(out)?;
    let path = |name: &str| out.join(name);
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        args: std::env::args().collect(),
        model: cfg.model.to_string(),
        config: cfg.to_text(),
        config_hash: cfg.hash(),
        data_dir: data.display().to_string(),
        dataset_hash: dataset.content_hash(),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        strict,
        started_unix: unix_now(),
        outputs: RunOutputs {
            config: "config.txt".into(),
            log: "log.jsonl".into(),
            checkpoint: CHECKPOINT_FILE.into(),
            metrics_json: "metrics.json".into(),
            metrics_csv: "metrics.csv".into(),
        },
    };
    fs::write(path("run.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::write(path("config.txt"), cfg.to_text())?;

    let mut log = BufWriter::new(File::create(path("log.jsonl"))?);
    let mut trainer = Trainer::new(&dataset, cfg.clone())?;
    log::info!(
        "training {} on {} users, {} items; {} steps per epoch",
        cfg.model,
        dataset.num_users,
        dataset.num_items,
        trainer.steps_per_epoch()
    );
    let mut last: Option<LogRecord> = None;
    let mut io_error: Option<std::io::Error> = None;
    while !trainer.is_finished() {
        let outcome = trainer.run_epoch(&mut |r: &LogRecord| {
            if let Err(e) = writeln!(log, "{}", r.to_json()) {
                io_error.get_or_insert(e);
            }
            if r.kind == RecordKind::Epoch {
                let val = r.validation_recall.map(|v| format!(", validation recall {v:.4}")).unwrap_or_default();
                log::info!("epoch {} loss {:.4}{val}", r.epoch, r.loss.total);
            }
            last = Some(r.clone());
        });
        if let Some(e) = io_error.take() {
            return Err(e.into());
        }
        match outcome {
            Ok(_) => trainer.checkpoint().save(&path(CHECKPOINT_FILE))?,
            Err(e @ Error::NonFinite { .. }) => {
                log.flush()?;
                let diag = Diagnostic {
                    error: e.to_string(),
                    failed_epoch: trainer.checkpoint().epoch + 1,
                    last_record: last.as_ref(),
                    config: cfg.to_text(),
                };
                fs::write(path("diagnostic.json"), serde_json::to_string_pretty(&diag)? + "\n")?;
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    log.flush()?;

    let ckpt = trainer.into_checkpoint();
    let stack = ckpt.scoring_stack(&dataset)?;
    let report = evaluate(&stack, &dataset, cfg.eval_n, ExclusionPolicy::BothViews, Relevance::If)?;
    write_report(out, "metrics", &report)?;
    log::info!("best epoch {} of {}", ckpt.best_epoch, ckpt.epoch);
    println!("{}", report.to_json());
    Ok(())
}

fn load_pair(checkpoint: &Path, data: &Path) -> Result<(Checkpoint, InteractionDataset), Failure> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = InteractionDataset::read_dir(data)?;
    ckpt.check_dataset(&dataset)?;
    Ok((ckpt, dataset))
}

fn cmd_evaluate(checkpoint: &Path, data: &Path, n: usize, relevant: &str, exclude: &str, out: Option<&Path>) -> CmdResult {
    let relevant: Relevance = parse_arg(relevant)?;
    let exclude: ExclusionPolicy = parse_arg(exclude)?;
    if n == 0 {
        return Err(Failure::Usage("--n must be >= 1".into()));
    }
    let (ckpt, dataset) = load_pair(checkpoint, data)?;
    let stack = ckpt.scoring_stack(&dataset)?;
    let report = evaluate(&stack, &dataset, n, exclude, relevant)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir)?;
    }
    write_report(&dir, "evaluation", &report)?;
    println!("{}", report.to_json());
    Ok(())
}

fn cmd_recommend(checkpoint: &Path, data: &Path, user: &str, n: usize, exclude: &str) -> CmdResult {
    let exclude: ExclusionPolicy = parse_arg(exclude)?;
    if n == 0 {
        return Err(Failure::Usage("--n must be >= 1".into()));
    }
    let (ckpt, dataset) = load_pair(checkpoint, data)?;
    let Some(u) = dataset.users.dense(user) else {
        return Err(Failure::Usage(format!("unknown user {user:?}")));
    };
    let stack = ckpt.scoring_stack(&dataset)?;
    let ranked = rank_for(&stack, &dataset, &[u as usize], n, exclude)?;
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for (item, score) in ranked[0].ranked_items.iter().zip(&ranked[0].scores) {
        writeln!(w, "{}\t{score:.6}", dataset.items.external(*item).unwrap_or("?"))?;
    }
    Ok(())
}
