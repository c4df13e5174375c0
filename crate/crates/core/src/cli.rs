//! Command-line surface: data generation, training, evaluation, stride
//! sweeps and segment traces.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::answer::decode_maxpool;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::chunking::{ChunkingError, Episode};
use crate::config::{ConfigError, RunConfig};
use crate::data::{generate_synthetic, length_stats, load_dataset, save_dataset, DataError, QAExample};
use crate::episode::{rollout, EpisodeError, RolloutMode};
use crate::metrics::{evaluate, stride_sweep, EvalReport, SweepGrid};
use crate::model::{Mode, Model};
use crate::trainer::{StepLog, TrainError, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const TRACE_FILE: &str = "trace.txt";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Chunking(#[from] ChunkingError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Debug, Parser)]
#[command(name = "rcm", version, about = "Recurrent chunked reader for long-document QA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a reader and write its checkpoint and per-step metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write predictions and metric tables.
    Eval(EvalArgs),
    /// Train fixed-stride readers over a grid of training and prediction strides.
    Sweep(SweepArgs),
    /// Print per-segment reading traces for selected examples.
    Trace(TraceArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `data_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `count`.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from `<out>/checkpoint.bin` when present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<out>/checkpoint.bin`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Prediction stride for fixed-stride readers.
    #[arg(long)]
    pub stride: Option<i64>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training set.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation set; defaults to the training set.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training strides, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub strides: Vec<i64>,
    /// Prediction strides; defaults to the training strides.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub pred_strides: Vec<i64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Example indices, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ids: Vec<usize>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn load_examples(cfg: &RunConfig, path: &Path) -> Result<Vec<QAExample>, CliError> {
    let vocab = cfg.synth().vocab();
    load_dataset(path, &vocab).map_err(|e| match e {
        DataError::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    })
}

/// Summary printed by `gen-data`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub count: usize,
    pub mean_len: f64,
    pub max_len: usize,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<GenSummary, CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.data_seed = s;
    }
    if let Some(c) = args.count {
        cfg.count = c;
    }
    let synth = cfg.synth();
    let examples = generate_synthetic(&synth)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_dataset(&args.out, &examples, &synth.vocab())?;
    let (count, mean_len, max_len) = length_stats(&examples);
    println!("examples {count}  mean doc length {mean_len:.1}  max doc length {max_len}");
    Ok(GenSummary {
        count,
        mean_len,
        max_len,
    })
}

fn resolve_mode(cfg: &mut RunConfig, flag: Option<&str>) -> Result<(), CliError> {
    if let Some(m) = flag {
        cfg.mode = m.parse().map_err(CliError::Usage)?;
    }
    if !cfg.mode.uses_policy() {
        log::warn!(
            "mode {} reads with a fixed stride of {}; the action space is ignored",
            cfg.mode,
            cfg.stride
        );
    }
    Ok(())
}

/// Trains per `args`; returns the finished trainer.
pub fn cmd_train(args: &TrainArgs) -> Result<Trainer, CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    resolve_mode(&mut cfg, args.mode.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let data = load_examples(&cfg, &args.data)?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    ensure_dir(&args.out)?;
    let model = Model::new(cfg.model(), cfg.mode, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train())?;

    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    let metrics_path = args.out.join(METRICS_FILE);
    let mut rows: Vec<String> = Vec::new();
    if args.resume && ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        trainer.resume(&ckpt)?;
        let old = fs::read_to_string(&metrics_path).unwrap_or_default();
        rows = old
            .lines()
            .skip(1)
            .filter(|l| {
                l.split(',')
                    .next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .is_some_and(|s| s <= trainer.step)
            })
            .map(String::from)
            .collect();
        log::info!("resumed from step {}", trainer.step);
    }
    write_file(&args.out.join("config.toml"), &cfg.to_toml())?;

    let mut metrics = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    let mut header = String::from(StepLog::CSV_HEADER);
    header.push('\n');
    for r in &rows {
        let _ = writeln!(header, "{r}");
    }
    metrics.write_all(header.as_bytes()).map_err(io_err(&metrics_path))?;

    let every = cfg.checkpoint_every;
    let total = trainer.config.total_steps;
    let result = trainer.run(&data, |t| {
        let last = t.log.last().expect("a step was logged");
        writeln!(metrics, "{}", last.csv_row()).map_err(|e| TrainError::Config(e.to_string()))?;
        if every > 0 && t.step % every == 0 {
            t.checkpoint().save(&ckpt_path)?;
        }
        if t.step % 50 == 0 || t.step == total {
            log::info!(
                "step {} lr {:.2e} L_ans {:.3} L_cs {:.3} L_cp {:.3} R {:.3}",
                t.step,
                last.lr,
                last.l_ans,
                last.l_cs,
                last.l_cp,
                last.mean_r
            );
        }
        Ok(())
    });
    // On failure the parameters are still those of the last completed step.
    trainer.checkpoint().save(&ckpt_path)?;
    result?;
    Ok(trainer)
}

/// Builds the reader described by `cfg` and loads `ckpt`; the checkpoint's
/// mode takes precedence over the configured one.
pub fn load_model(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Model, CliError> {
    let mode = match ckpt.meta.get("mode") {
        Some(m) => m.parse::<Mode>().map_err(CliError::Usage)?,
        None => cfg.mode,
    };
    let mut model = Model::new(cfg.model(), mode, 0)?;
    model.restore(ckpt)?;
    Ok(model)
}

fn checkpoint_path(out: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| out.join(CHECKPOINT_FILE), Path::to_path_buf)
}

/// Writes all evaluation outputs of `report` under `out`.
pub fn write_report(out: &Path, report: &EvalReport) -> Result<(), CliError> {
    let mut preds = String::new();
    for p in &report.predictions {
        preds.push_str(&serde_json::to_string(p).expect("prediction serialises"));
        preds.push('\n');
    }
    write_file(&out.join(PREDICTIONS_FILE), &preds)?;
    write_file(&out.join("f1.csv"), &report.f1_csv())?;
    write_file(&out.join("hit_rate.csv"), &report.hit_rate_csv())?;
    write_file(&out.join("center_distance.csv"), &report.center_distance_csv())?;
    write_file(&out.join("distance_f1.csv"), &report.distance_f1_csv())?;
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let ckpt = Checkpoint::load(&checkpoint_path(&args.out, args.checkpoint.as_deref()))?;
    let model = load_model(&cfg, &ckpt)?;
    let data = load_examples(&cfg, &args.data)?;
    ensure_dir(&args.out)?;
    let report = evaluate(
        &model,
        &data,
        &cfg.synth().vocab(),
        cfg.segments,
        args.stride,
        cfg.bucket_width,
    )?;
    write_report(&args.out, &report)?;
    println!(
        "F1 {:.2}  hit rate {:.2}  examples {}",
        report.f1 * 100.0,
        report.hit_rate * 100.0,
        data.len()
    );
    Ok(report)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepGrid, CliError> {
    if args.strides.is_empty() {
        return Err(CliError::Usage("--strides needs at least one value".into()));
    }
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.mode = Mode::Baseline;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let train_data = load_examples(&cfg, &args.data)?;
    let eval_data = match &args.eval_data {
        Some(p) => load_examples(&cfg, p)?,
        None => train_data.clone(),
    };
    let pred = if args.pred_strides.is_empty() {
        args.strides.clone()
    } else {
        args.pred_strides.clone()
    };
    ensure_dir(&args.out)?;
    let vocab = cfg.synth().vocab();
    let grid = stride_sweep(
        &args.strides,
        &pred,
        |stride| {
            let mut c = cfg.clone();
            c.stride = stride;
            let model = Model::new(c.model(), Mode::Baseline, c.seed)?;
            let mut t = Trainer::new(model, c.train())?;
            t.run(&train_data, |_| Ok(()))?;
            log::info!("trained stride {stride}");
            Ok::<_, CliError>(t.model)
        },
        |model, stride| {
            let r = evaluate(model, &eval_data, &vocab, cfg.segments, Some(stride), cfg.bucket_width)?;
            Ok(r.f1)
        },
    )?;
    write_file(&args.out.join(SWEEP_FILE), &grid.to_csv())?;
    print!("{}", grid.to_csv());
    Ok(grid)
}

/// One line per segment: where it starts, the move taken after it, its
/// containment score and its best local span.
pub fn trace_lines(id: usize, episode: &Episode, example: &QAExample, cfg: &RunConfig) -> Vec<String> {
    let vocab = cfg.synth().vocab();
    episode
        .segments
        .iter()
        .enumerate()
        .map(|(c, s)| {
            let single = Episode {
                segments: vec![s.clone()],
                rewards: vec![],
                returns: vec![],
                credits: vec![],
                prediction: None,
            };
            let local = decode_maxpool(&single, cfg.max_answer_len);
            let action = s
                .action
                .map_or_else(|| "-".to_string(), |a| format!("{:+}", a.stride));
            let q = s.q.map_or_else(|| "-".to_string(), |q| format!("{q:.4}"));
            let span = match local.as_ref().and_then(|p| p.doc_span) {
                Some((a, b)) => format!("[{a},{b}] \"{}\"", vocab.tokens(&example.doc_tokens[a..=b]).join(" ")),
                None => "[UNK]".to_string(),
            };
            let score = local.map_or(0.0, |p| p.score);
            let policy = s.policy_probs.as_ref().map_or_else(String::new, |p| {
                let cells: Vec<String> = p.iter().map(|x| format!("{x:.2}")).collect();
                format!(" policy=[{}]", cells.join(","))
            });
            format!(
                "example={id} segment={} doc_start={} action={action} q={q} span={span} score={score:.4} contains={}{policy}",
                c + 1,
                s.doc_start(),
                s.contains
            )
        })
        .collect()
}

pub fn cmd_trace(args: &TraceArgs) -> Result<Vec<String>, CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let ckpt = Checkpoint::load(&checkpoint_path(&args.out, args.checkpoint.as_deref()))?;
    let model = load_model(&cfg, &ckpt)?;
    let data = load_examples(&cfg, &args.data)?;
    let mut lines = Vec::new();
    for &id in &args.ids {
        let ex = data.get(id).ok_or_else(|| {
            CliError::Usage(format!("unknown example id {id}; dataset has {} examples", data.len()))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = rollout(&model, ex, cfg.segments, RolloutMode::Test, None, &mut rng)?.episode;
        lines.extend(trace_lines(id, &ep, ex, &cfg));
    }
    ensure_dir(&args.out)?;
    let mut text = lines.join("\n");
    text.push('\n');
    write_file(&args.out.join(TRACE_FILE), &text)?;
    print!("{text}");
    Ok(lines)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
        Command::Trace(a) => cmd_trace(&a).map(|_| ()),
    }
}
