//! The `mdm` command line: Gaussian benchmark sweeps, synthetic data
//! generation, training (single runs and λ × seed grids), modality-drop
//! evaluation and critic-based sample scoring.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use mdm_core::bench::{bench_point, BenchRow};
use mdm_core::data::{gen_synthetic_multimodal, load_dataset, save_dataset, GaussianSpec, Splits};
use mdm_core::eval::{self, DropCondition, DropRow, MetricsReport, ModalityMeans};
use mdm_core::fusion::{self, FusionEncoderSpec, FusionTrainState, TotalLossConfig, TrainReport};
use mdm_core::nn;

use crate::config::{parse_override, ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "mdm", version, about = "Neural multivariate dependency measures for multimodal learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArg {
    /// Checkpoint to load; defaults to `<out>/checkpoint.mdm`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate dependency between correlated Gaussians over a ρ sweep.
    GaussianBench(Common),
    /// Write the synthetic multimodal task as JSONL splits.
    GenData(Common),
    /// Train a fusion model, or a λ × seed grid when `grid.*` is set.
    Train(Common),
    /// Accuracy ratios with non-text modalities kept and the rest replaced.
    EvalDrop {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Rank samples by critic score.
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Number of high and low samples to print.
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<mdm_core::Error> for CliError {
    fn from(e: mdm_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn config_err(e: mdm_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let started = unix_now();
    let (name, common) = match &cli.command {
        Command::GaussianBench(c) => ("gaussian-bench", c),
        Command::GenData(c) => ("gen-data", c),
        Command::Train(c) => ("train", c),
        Command::EvalDrop { common, .. } => ("eval-drop", common),
        Command::Score { common, .. } => ("score", common),
    };
    let result = resolve(common).and_then(|cfg| {
        let out = cfg.out.clone();
        let r = dispatch(&cli.command, &cfg);
        let code = r.as_ref().map_or_else(CliError::exit_code, |_| 0);
        // timestamps live only here, so every other output stays reproducible
        if out.is_dir() {
            let manifest = serde_json::json!({
                "command": name,
                "args": args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>(),
                "version": env!("CARGO_PKG_VERSION"),
                "seed": cfg.seed,
                "started_unix": started,
                "finished_unix": unix_now(),
                "exit_code": code,
            });
            let _ = fs::write(out.join("manifest.json"), format!("{manifest:#}\n"));
        }
        r
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mdm {name}: {e}");
            e.exit_code()
        }
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let text = match &common.config {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut overrides = common
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        overrides.push(("out".into(), out.display().to_string()));
    }
    Ok(RunConfig::resolve(text.as_deref(), &overrides)?)
}

fn dispatch(command: &Command, cfg: &RunConfig) -> CliResult<()> {
    match command {
        Command::GaussianBench(_) => cmd_gaussian_bench(cfg),
        Command::GenData(_) => cmd_gen_data(cfg),
        Command::Train(_) => cmd_train(cfg),
        Command::EvalDrop { ckpt, .. } => cmd_eval_drop(cfg, ckpt.checkpoint.as_deref()),
        Command::Score { ckpt, k, .. } => cmd_score(cfg, ckpt.checkpoint.as_deref(), k.unwrap_or(cfg.score_k)),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub const BENCH_HEADER: &str = "rho,kind,estimate,oracle,abs_error";

fn bench_line(r: &BenchRow) -> String {
    format!("{},{},{},{},{}", r.rho, r.kind, r.estimate, r.oracle, r.abs_error)
}

pub fn cmd_gaussian_bench(cfg: &RunConfig) -> CliResult<()> {
    let b = &cfg.bench.config;
    for &rho in &cfg.bench.rhos {
        GaussianSpec::new(b.dim, rho, b.vars, b.n).map_err(config_err)?;
    }
    if cfg.bench.rhos.is_empty() || cfg.bench.kinds.is_empty() {
        return Err(CliError::Config("bench.rhos and bench.kinds must be non-empty".into()));
    }
    fs::create_dir_all(&cfg.out)?;
    let mut w = create(&cfg.out.join("bench.csv"))?;
    writeln!(w, "{BENCH_HEADER}")?;
    for &kind in &cfg.bench.kinds {
        for &rho in &cfg.bench.rhos {
            match bench_point(rho, kind, b, cfg.seed) {
                Ok(row) => {
                    writeln!(w, "{}", bench_line(&row))?;
                    w.flush()?;
                    println!("{kind} rho={rho}: {:.4} (oracle {:.4})", row.estimate, row.oracle);
                }
                Err(e) => {
                    w.flush()?;
                    return Err(e.into());
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_gen_data(cfg: &RunConfig) -> CliResult<()> {
    cfg.synthetic.validate().map_err(config_err)?;
    let splits = gen_synthetic_multimodal(&cfg.synthetic)?;
    fs::create_dir_all(&cfg.out)?;
    for (name, ds) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        save_dataset(&cfg.out.join(format!("{name}.jsonl")), &ds.samples)?;
    }
    println!(
        "wrote {} / {} / {} samples to {}",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        cfg.out.display()
    );
    Ok(())
}

/// Loads the data directory, or generates the synthetic task under `seed`.
fn load_splits(cfg: &RunConfig, seed: u64) -> CliResult<Splits> {
    if let Some(dir) = &cfg.data_dir {
        let load = |name: &str| -> CliResult<_> {
            let p = dir.join(format!("{name}.jsonl"));
            if !p.is_file() {
                return Err(CliError::Config(format!("missing dataset file {}", p.display())));
            }
            Ok(load_dataset(&p)?)
        };
        return Ok(Splits {
            train: load("train")?,
            valid: load("valid")?,
            test: load("test")?,
        });
    }
    if cfg.synthetic_enabled {
        let spec = mdm_core::data::SyntheticTaskSpec {
            seed,
            ..cfg.synthetic.clone()
        };
        spec.validate().map_err(config_err)?;
        return Ok(gen_synthetic_multimodal(&spec)?);
    }
    Err(CliError::Config(
        "no dataset: set data.dir or enable data.synthetic = true".into(),
    ))
}

fn encoder_spec(cfg: &RunConfig, splits: &Splits) -> CliResult<FusionEncoderSpec> {
    let mut spec = FusionEncoderSpec::for_dataset(cfg.encoder.variant, &splits.train).map_err(config_err)?;
    spec.hidden = cfg.encoder.hidden;
    spec.out_dim = cfg.encoder.out_dim;
    spec.dropout = cfg.encoder.dropout;
    spec.validate().map_err(config_err)?;
    Ok(spec)
}

fn split_metrics(state: &FusionTrainState, splits: &Splits) -> CliResult<Vec<(&'static str, MetricsReport)>> {
    let mut rows = Vec::new();
    for (name, ds) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        if ds.is_empty() {
            continue;
        }
        let b = ds.full_batch()?;
        rows.push((name, eval::compute_metrics(&state.model.predict(&b)?, &b.y)?));
    }
    Ok(rows)
}

/// Writes checkpoint, log and metrics of one run into `dir`.
fn write_run(dir: &Path, loss: &TotalLossConfig, report: &TrainReport, splits: &Splits) -> CliResult<Vec<(&'static str, MetricsReport)>> {
    fs::create_dir_all(dir)?;
    let critic = (loss.lambda > 0.0).then_some(&report.state.critic.critic);
    let mut w = create(&dir.join("checkpoint.mdm"))?;
    fusion::write_checkpoint(&mut w, &report.state.model, critic)?;
    w.flush()?;
    let mut w = create(&dir.join("train_log.csv"))?;
    fusion::write_log(&mut w, &report.log)?;
    w.flush()?;
    let metrics = split_metrics(&report.state, splits)?;
    let mut w = create(&dir.join("metrics.csv"))?;
    eval::write_metrics(&mut w, &metrics)?;
    w.flush()?;
    Ok(metrics)
}

pub const SUMMARY_HEADER: &str =
    "seed,lambda,kind,best_epoch,val_mae,val_acc2,val_acc7,test_mae,test_acc2,test_acc7,ratio_a,ratio_v,ratio_av,aborted";

pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    cfg.loss.validate().map_err(config_err)?;
    if cfg.grid_lambdas.is_none() && cfg.grid_seeds.is_none() {
        let splits = load_splits(cfg, cfg.seed)?;
        let spec = encoder_spec(cfg, &splits)?;
        let report = fusion::train(&cfg.loss, spec, &splits)?;
        let metrics = write_run(&cfg.out, &cfg.loss, &report, &splits)?;
        for (name, m) in &metrics {
            println!("{name}: mae {:.4} acc2 {:.4} acc7 {:.4}", m.mae, m.acc2, m.acc7);
        }
        if let Some(e) = report.aborted {
            return Err(CliError::Runtime(format!("{e}; last good parameters were saved")));
        }
        return Ok(());
    }

    let seeds = cfg.grid_seeds.clone().unwrap_or_else(|| vec![cfg.seed]);
    let lambdas = cfg.grid_lambdas.clone().unwrap_or_else(|| vec![cfg.loss.lambda]);
    for &l in &lambdas {
        TotalLossConfig {
            lambda: l,
            ..cfg.loss.clone()
        }
        .validate()
        .map_err(config_err)?;
    }
    fs::create_dir_all(&cfg.out)?;
    let mut summary = create(&cfg.out.join("summary.csv"))?;
    writeln!(summary, "{SUMMARY_HEADER}")?;
    let mut failed = None;
    for &seed in &seeds {
        let splits = load_splits(cfg, seed)?;
        let spec = encoder_spec(cfg, &splits)?;
        let means = ModalityMeans::of(&splits.train)?;
        let test = splits.test.full_batch()?;
        for &lambda in &lambdas {
            let loss = TotalLossConfig {
                lambda,
                seed,
                ..cfg.loss.clone()
            };
            let report = fusion::train(&loss, spec.clone(), &splits)?;
            let dir = cfg.out.join(format!("seed{seed}")).join(format!("lambda{lambda}"));
            let metrics = write_run(&dir, &loss, &report, &splits)?;
            let get = |split: &str| metrics.iter().find(|(n, _)| *n == split).map(|(_, m)| *m);
            let cell = |m: Option<MetricsReport>, f: fn(&MetricsReport) -> f64| m.map(|m| f(&m).to_string()).unwrap_or_default();
            let (val, tst) = (get("valid"), get("test"));
            let ratios: Vec<String> = match eval::modality_drop_eval(&report.state.model, &test, cfg.drop_substitution, Some(&means)) {
                Ok(rows) => rows.iter().filter(|r| r.condition != DropCondition::Control).map(|r| r.ratio.to_string()).collect(),
                Err(_) => vec![String::new(); 3],
            };
            writeln!(
                summary,
                "{seed},{lambda},{},{},{},{},{},{},{},{},{},{}",
                loss.kind,
                report.state.best.epoch,
                cell(val, |m| m.mae),
                cell(val, |m| m.acc2),
                cell(val, |m| m.acc7),
                cell(tst, |m| m.mae),
                cell(tst, |m| m.acc2),
                cell(tst, |m| m.acc7),
                ratios.join(","),
                report.aborted.is_some()
            )?;
            summary.flush()?;
            println!("seed {seed} lambda {lambda}: val acc2 {}", cell(val, |m| m.acc2));
            if let Some(e) = report.aborted {
                failed.get_or_insert(format!("seed {seed}, lambda {lambda}: {e}"));
            }
        }
    }
    match failed {
        Some(msg) => Err(CliError::Runtime(msg)),
        None => Ok(()),
    }
}

fn load_state(cfg: &RunConfig, checkpoint: Option<&Path>, splits: &Splits) -> CliResult<(FusionTrainState, bool)> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| cfg.checkpoint.clone())
        .unwrap_or_else(|| cfg.out.join("checkpoint.mdm"));
    let file = File::open(&path).map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
    let named = nn::read_checkpoint(std::io::BufReader::new(file))?;
    let spec = encoder_spec(cfg, splits)?;
    Ok(fusion::restore_state(&cfg.loss, spec, &named)?)
}

pub fn cmd_eval_drop(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<()> {
    let splits = load_splits(cfg, cfg.seed)?;
    let (state, _) = load_state(cfg, checkpoint, &splits)?;
    let means = ModalityMeans::of(&splits.train)?;
    let rows: Vec<DropRow> =
        eval::modality_drop_eval(&state.model, &splits.test.full_batch()?, cfg.drop_substitution, Some(&means))?;
    fs::create_dir_all(&cfg.out)?;
    let mut w = create(&cfg.out.join("drop_ratios.csv"))?;
    eval::write_drop_ratios(&mut w, &rows)?;
    w.flush()?;
    for r in &rows {
        println!("{}: ratio {:.4}", r.condition, r.ratio);
    }
    Ok(())
}

pub fn cmd_score(cfg: &RunConfig, checkpoint: Option<&Path>, k: usize) -> CliResult<()> {
    let splits = load_splits(cfg, cfg.seed)?;
    let (state, has_critic) = load_state(cfg, checkpoint, &splits)?;
    if !has_critic {
        return Err(CliError::Runtime(
            "checkpoint holds no critic (it was trained with lambda = 0); nothing to score with".into(),
        ));
    }
    let ds = match cfg.score_split.as_str() {
        "train" => &splits.train,
        "valid" => &splits.valid,
        _ => &splits.test,
    };
    let ranking = eval::interpretability_score(&state, ds, k)?;
    fs::create_dir_all(&cfg.out)?;
    let mut w = create(&cfg.out.join("scores.csv"))?;
    eval::write_scores(&mut w, &ranking)?;
    w.flush()?;
    for s in ranking.top() {
        println!("H\t{}\t{}", s.index, s.score);
    }
    for s in ranking.bottom() {
        println!("L\t{}\t{}", s.index, s.score);
    }
    Ok(())
}
