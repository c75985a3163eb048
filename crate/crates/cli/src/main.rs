//! `duet`: train, evaluate, inspect and ablate the forecaster from the shell.
//!
//! Exit codes: 0 success, 2 invalid flags or configuration, 3 data or
//! checkpoint problems, 4 training divergence. Failures print one line to
//! stderr; stdout carries only machine-readable results.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use duet::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use duet::data::{load_dataset, split_dataset, write_dataset_csv, SplitSpec, TimeSeriesDataset};
use duet::model::{dense_gates, duet_forward};
use duet::pipeline::{prepare, prepare_with, train_and_evaluate, Report};
use duet::rng::{substream, Stream};
use duet::synthetic::{generate, SyntheticKind, SyntheticSpec};
use duet::train::evaluate;
use duet::{DuetConfig, DuetError, MetricKind, Mode, VariantKind};

#[derive(Parser)]
#[command(name = "duet", version, about = "Dual-clustering multivariate time-series forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write model.ckpt, report.json and manifest.json.
    Train(TrainArgs),
    /// Score a checkpoint on one split part; prints `mse<TAB>mae`.
    Eval(EvalArgs),
    /// Export gate weights or channel masks for one window as CSV.
    Inspect(InspectArgs),
    /// Train and evaluate several variants and seeds; writes ablation.csv.
    Ablate(AblateArgs),
    /// Train and evaluate over a list of extractor counts; writes sweep.csv.
    Sweep(SweepArgs),
    /// Write a synthetic dataset in the ingestion CSV format.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CSV with a header row; one column per channel.
    #[arg(long, required = true)]
    data: PathBuf,
    /// Header name of the timestamp column to drop.
    #[arg(long, default_value = "date")]
    date_column: String,
    #[arg(long, default_value = "7:1:2")]
    split: SplitSpec,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 96)]
    lookback: usize,
    #[arg(long, default_value_t = 96)]
    horizon: usize,
    /// Extractors per temporal cluster (M).
    #[arg(long, default_value_t = 4)]
    experts: usize,
    /// Extractors kept per channel (k).
    #[arg(long, default_value_t = 2)]
    topk: usize,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    #[arg(long, default_value_t = 25)]
    kernel: usize,
    /// Feature width.
    #[arg(long, default_value_t = 128)]
    d: usize,
    /// Router hidden width.
    #[arg(long, default_value_t = 64)]
    d0: usize,
    /// Feed-forward width (defaults to 2·d).
    #[arg(long)]
    dff: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value = "learned_mahalanobis")]
    metric: MetricKind,
}

impl ModelArgs {
    fn config(&self, channels: usize, variant: VariantKind, seed: u64) -> duet::Result<DuetConfig> {
        let mut cfg = DuetConfig::new(self.lookback, self.horizon, channels);
        cfg.experts = self.experts;
        cfg.top_k = self.topk;
        cfg.gamma = self.gamma;
        cfg.kernel = self.kernel;
        cfg.hidden = self.d;
        cfg.router_hidden = self.d0;
        cfg.ffn_hidden = self.dff.unwrap_or(2 * self.d);
        cfg.temperature = self.temperature;
        cfg.lr = self.lr;
        cfg.batch_size = self.batch_size;
        cfg.max_epochs = self.max_epochs;
        cfg.patience = self.patience;
        cfg.metric = self.metric;
        cfg.variant = variant;
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "full")]
    variant: VariantKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, required = true)]
    out: PathBuf,
    /// Zero all timing fields so outputs are byte-reproducible.
    #[arg(long)]
    reproducible: bool,
    /// Log per-epoch losses to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required = true)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    data: PathBuf,
    #[arg(long, default_value = "date")]
    date_column: String,
    /// Split ratios; defaults to the one stored in the checkpoint.
    #[arg(long)]
    split: Option<SplitSpec>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split_part: String,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    reproducible: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Inspect {
    Gates,
    Mask,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, required = true)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    data: PathBuf,
    #[arg(long, default_value = "date")]
    date_column: String,
    #[arg(long)]
    split: Option<SplitSpec>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split_part: String,
    #[arg(long, value_enum)]
    what: Inspect,
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[arg(long, required = true)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "full,no_tcm,no_ccm,full_attention,temporal_info")]
    variants: Vec<VariantKind>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, required = true)]
    out: PathBuf,
    #[arg(long)]
    reproducible: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Extractor counts to try; k is capped at each count.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8")]
    experts_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, required = true)]
    out: PathBuf,
    #[arg(long)]
    reproducible: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, required = true)]
    kind: SyntheticKind,
    #[arg(long, required = true)]
    length: usize,
    #[arg(long, required = true)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise multiplier (two_regime).
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Steps per regime segment (two_regime).
    #[arg(long, default_value_t = 240)]
    segment: usize,
    /// Pair correlation (correlated_pair).
    #[arg(long, default_value_t = 0.95)]
    correlation: f64,
    #[arg(long, required = true)]
    out: PathBuf,
    /// Also write one regime label per step (two_regime).
    #[arg(long)]
    regimes_out: Option<PathBuf>,
}

/// Written before training starts and rewritten once outputs exist.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    build: &'static str,
    config: &'a DuetConfig,
    split: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    status: &'a str,
    started_unix_seconds: u64,
    wall_seconds: f64,
}

const BUILD: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

struct CliError {
    code: u8,
    message: String,
}

impl From<DuetError> for CliError {
    fn from(e: DuetError) -> Self {
        let code = match &e {
            DuetError::Divergence { .. } => 4,
            DuetError::InvalidK { .. }
            | DuetError::InvalidKernel { .. }
            | DuetError::InvalidConfig(_)
            | DuetError::InvalidSplit(_)
            | DuetError::InvalidSpec(_) => 2,
            _ => 3,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        DuetError::Io(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

fn flag_error(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

fn load(path: &Path, date_column: &str) -> CliResult<TimeSeriesDataset> {
    Ok(load_dataset(path, true, Some(date_column))?)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn now_unix(reproducible: bool) -> u64 {
    if reproducible {
        return 0;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_report(path: &Path, report: &Report, reproducible: bool) -> CliResult<()> {
    let mut text = if reproducible {
        report.canonical_json()
    } else {
        report.to_json()
    };
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// One training run into `dir`: manifest first, then checkpoint and report.
#[allow(clippy::too_many_arguments)]
fn train_into(
    dir: &Path,
    command: &str,
    ds: &TimeSeriesDataset,
    data_path: &Path,
    split: SplitSpec,
    cfg: &DuetConfig,
    reproducible: bool,
    verbose: bool,
) -> CliResult<Report> {
    fs::create_dir_all(dir)?;
    let started = now_unix(reproducible);
    let clock = Instant::now();
    let manifest_path = dir.join("manifest.json");
    let ckpt_path = dir.join("model.ckpt");
    let report_path = dir.join("report.json");
    let mut manifest = RunManifest {
        command,
        build: BUILD,
        config: cfg,
        split: split.to_string(),
        inputs: vec![data_path.display().to_string()],
        outputs: vec![manifest_path.display().to_string()],
        status: "running",
        started_unix_seconds: started,
        wall_seconds: 0.0,
    };
    write_json(&manifest_path, &manifest)?;

    let data = prepare(ds, split, cfg.lookback, cfg.horizon)?;
    let outcome = train_and_evaluate(&dataset_name(data_path), &data, cfg, split, |log| {
        if verbose {
            eprintln!("epoch {}\ttrain_loss {:.6}\tval_mse {:.6}", log.epoch, log.train_loss, log.val_mse);
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            manifest.status = "failed";
            manifest.wall_seconds = if reproducible { 0.0 } else { clock.elapsed().as_secs_f64() };
            write_json(&manifest_path, &manifest)?;
            return Err(e.into());
        }
    };
    save_checkpoint(
        &Checkpoint {
            state: outcome.state,
            scaler: outcome.scaler,
            split: Some(split),
        },
        &ckpt_path,
    )?;
    write_report(&report_path, &outcome.report, reproducible)?;
    manifest.outputs = vec![
        manifest_path.display().to_string(),
        ckpt_path.display().to_string(),
        report_path.display().to_string(),
    ];
    manifest.status = "ok";
    manifest.wall_seconds = if reproducible { 0.0 } else { clock.elapsed().as_secs_f64() };
    write_json(&manifest_path, &manifest)?;
    Ok(outcome.report)
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let ds = load(&a.data.data, &a.data.date_column)?;
    let cfg = a.model.config(ds.channels(), a.variant, a.seed)?;
    let report = train_into(&a.out, "train", &ds, &a.data.data, a.data.split, &cfg, a.reproducible, a.verbose)?;
    println!("{}\t{}", report.mse, report.mae);
    Ok(())
}

/// Checkpoint plus the windows of one split part, rebuilt with the stored
/// scaler.
fn checkpoint_windows(
    ckpt: &Path,
    data: &Path,
    date_column: &str,
    split: Option<SplitSpec>,
    part: &str,
) -> CliResult<(Checkpoint, TimeSeriesDataset, SplitSpec, Vec<duet::data::WindowPair>)> {
    let ck = load_checkpoint(ckpt)?;
    let ds = load(data, date_column)?;
    let cfg = &ck.state.config;
    if ds.channels() != cfg.channels {
        return Err(DuetError::ConfigMismatch(format!(
            "checkpoint has {} channels, {} has {}",
            cfg.channels,
            data.display(),
            ds.channels()
        ))
        .into());
    }
    let split = split.or(ck.split).unwrap_or_default();
    let ranges = split_dataset(ds.len(), split, cfg.lookback, cfg.horizon)?;
    let prepared = prepare_with(&ds, ranges, ck.scaler.clone(), cfg.lookback, cfg.horizon)?;
    let windows = prepared.part(part).expect("part validated by clap").to_vec();
    Ok((ck, ds, split, windows))
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let clock = Instant::now();
    let (ck, _, split, windows) = checkpoint_windows(&a.ckpt, &a.data, &a.date_column, a.split, &a.split_part)?;
    let cfg = &ck.state.config;
    let metrics = evaluate(&ck.state.best_params, cfg, &windows)?;
    if let Some(path) = &a.report {
        let wall = if a.reproducible { 0.0 } else { clock.elapsed().as_secs_f64() };
        let report = Report::new(&dataset_name(&a.data), cfg, &format!("{split}/{}", a.split_part), &metrics, wall);
        write_report(path, &report, a.reproducible)?;
    }
    println!("{}\t{}", metrics.mse, metrics.mae);
    Ok(())
}

fn csv_row(out: &mut impl Write, label: &str, values: impl IntoIterator<Item = f64>) -> std::io::Result<()> {
    write!(out, "{label}")?;
    for v in values {
        write!(out, ",{v}")?;
    }
    writeln!(out)
}

fn cmd_inspect(a: InspectArgs) -> CliResult<()> {
    let (ck, ds, _, windows) = checkpoint_windows(&a.ckpt, &a.data, &a.date_column, a.split, &a.split_part)?;
    let cfg = &ck.state.config;
    let w = windows.get(a.window).ok_or(DuetError::WindowOutOfRange {
        index: a.window,
        count: windows.len(),
    })?;
    let mut rng = substream(cfg.seed, Stream::Eval, 0, a.window as u64);
    let fc = duet_forward(w.x.view(), &ck.state.best_params, cfg, Mode::Eval, &mut rng)?;
    let mut out = std::io::BufWriter::new(fs::File::create(&a.out)?);
    match a.what {
        Inspect::Gates => {
            let gates = dense_gates(&fc.gates);
            write!(out, "channel")?;
            for m in 0..gates.ncols() {
                write!(out, ",expert_{m}")?;
            }
            writeln!(out)?;
            for (name, row) in ds.channel_names.iter().zip(gates.rows()) {
                csv_row(&mut out, name, row.iter().copied())?;
            }
        }
        Inspect::Mask => {
            // Variants without channel clustering have no probabilities; their
            // fixed mask stands in for P.
            let p = fc.relation.as_ref().map_or(&fc.mask.hard, |r| &r.p);
            write!(out, "matrix,channel")?;
            for name in &ds.channel_names {
                write!(out, ",{name}")?;
            }
            writeln!(out)?;
            for (label, m) in [("P", p), ("M", &fc.mask.hard)] {
                for (name, row) in ds.channel_names.iter().zip(m.rows()) {
                    csv_row(&mut out, &format!("{label},{name}"), row.iter().copied())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("DUET_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| flag_error(format!("DUET_THREADS must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| flag_error(format!("thread pool: {e}")))
}

struct Cell {
    label: String,
    cfg: DuetConfig,
}

/// Runs every cell (in parallel up to DUET_THREADS), each into its own
/// subdirectory, and returns per-cell results in input order.
fn run_cells(
    cells: &[Cell],
    out: &Path,
    command: &str,
    ds: &TimeSeriesDataset,
    data: &DataArgs,
    reproducible: bool,
) -> CliResult<Vec<Result<Report, CliError>>> {
    let pool = thread_pool()?;
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|c| {
                let dir = out.join(&c.label);
                train_into(&dir, command, ds, &data.data, data.split, &c.cfg, reproducible, false)
            })
            .collect()
    }))
}

/// Mean mse/mae per group over successful runs, in first-seen group order.
fn aggregate(groups: &[String], results: &[Result<Report, CliError>]) -> Vec<(String, f64, f64, usize, usize)> {
    let mut order: Vec<String> = Vec::new();
    for g in groups {
        if !order.contains(g) {
            order.push(g.clone());
        }
    }
    order
        .into_iter()
        .map(|g| {
            let mut mse = 0.0;
            let mut mae = 0.0;
            let (mut ok, mut failed) = (0, 0);
            for (gi, r) in groups.iter().zip(results) {
                if *gi != g {
                    continue;
                }
                match r {
                    Ok(rep) => {
                        mse += rep.mse;
                        mae += rep.mae;
                        ok += 1;
                    }
                    Err(_) => failed += 1,
                }
            }
            let n = ok.max(1) as f64;
            (g, mse / n, mae / n, ok, failed)
        })
        .collect()
}

fn finish_table(
    out: &Path,
    file: &str,
    key: &str,
    groups: &[String],
    cells: &[Cell],
    results: Vec<Result<Report, CliError>>,
) -> CliResult<()> {
    for (c, r) in cells.iter().zip(&results) {
        if let Err(e) = r {
            eprintln!("run {} failed: {}", c.label, e.message);
        }
    }
    if results.iter().all(Result::is_err) {
        let first = results.into_iter().find_map(Result::err).expect("at least one cell");
        return Err(CliError {
            code: first.code,
            message: format!("every run failed; first: {}", first.message),
        });
    }
    let path = out.join(file);
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    writeln!(w, "{key},mean_mse,mean_mae,runs,failed")?;
    for (g, mse, mae, ok, failed) in aggregate(groups, &results) {
        if ok == 0 {
            writeln!(w, "{g},,,{ok},{failed}")?;
        } else {
            writeln!(w, "{g},{mse},{mae},{ok},{failed}")?;
        }
    }
    w.flush()?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CliResult<()> {
    let ds = load(&a.data.data, &a.data.date_column)?;
    let mut cells = Vec::new();
    let mut groups = Vec::new();
    for &v in &a.variants {
        for &seed in &a.seeds {
            cells.push(Cell {
                label: format!("{v}_seed{seed}"),
                cfg: a.model.config(ds.channels(), v, seed)?,
            });
            groups.push(v.to_string());
        }
    }
    fs::create_dir_all(&a.out)?;
    let results = run_cells(&cells, &a.out, "ablate", &ds, &a.data, a.reproducible)?;
    finish_table(&a.out, "ablation.csv", "variant", &groups, &cells, results)
}

fn cmd_sweep(a: SweepArgs) -> CliResult<()> {
    let ds = load(&a.data.data, &a.data.date_column)?;
    let mut cells = Vec::new();
    let mut groups = Vec::new();
    for &m in &a.experts_list {
        for &seed in &a.seeds {
            let mut model = a.model.clone();
            model.experts = m;
            model.topk = a.model.topk.min(m);
            cells.push(Cell {
                label: format!("experts{m}_seed{seed}"),
                cfg: model.config(ds.channels(), VariantKind::Full, seed)?,
            });
            groups.push(m.to_string());
        }
    }
    fs::create_dir_all(&a.out)?;
    let results = run_cells(&cells, &a.out, "sweep", &ds, &a.data, a.reproducible)?;
    finish_table(&a.out, "sweep.csv", "experts", &groups, &cells, results)
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        kind: a.kind,
        length: a.length,
        channels: a.channels,
        seed: a.seed,
        segment: a.segment,
        noise: a.noise,
        correlation: a.correlation,
    };
    let series = generate(&spec)?;
    write_dataset_csv(&series.dataset, &a.out)?;
    if let Some(path) = &a.regimes_out {
        let labels = series
            .regimes
            .as_ref()
            .ok_or_else(|| flag_error("--regimes-out needs --kind two_regime"))?;
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(w, "date,regime")?;
        for (t, r) in labels.iter().enumerate() {
            writeln!(w, "{t},{r}")?;
        }
        w.flush()?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // Collapse clap's multi-line message (up to the usage block) into
            // one line so it still names the offending flag.
            let text = e.to_string();
            let line: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("{}", line.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.message.replace('\n', " "));
            ExitCode::from(e.code)
        }
    }
}
