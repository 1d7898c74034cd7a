//! Command-line front end. Every command maps its failures onto a fixed set
//! of exit codes.

use crate::checkpoint::{self, CheckpointError};
use crate::config::{hex, ConfigError, RunConfig, Variant};
use crate::data::{DataError, Dataset};
use crate::eval::{analyze, evaluate, EvalError};
use crate::gradsuite;
use crate::maskops::{NoiseKind, NoiseSpec};
use crate::mp::MpConfig;
use crate::report::{analysis_csv, analysis_table, MetricsReport};
use crate::study::{self, StudyConfig, StudyError};
use crate::train::{split, train, TrainError};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_COMPAT: i32 = 5;

pub const DATASET_FILE: &str = "dataset.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.txt";
pub const LAYERS_FILE: &str = "layers.csv";
pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const ANALYSIS_TABLE_FILE: &str = "analysis.txt";
pub const ANALYSIS_CSV_FILE: &str = "analysis.csv";
pub const STUDY_FILE: &str = "refine_study.csv";

#[derive(Debug, Parser)]
#[command(name = "mpseg", version, about = "Mask-piloted segmentation decoder toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from the `synth` section of a config.
    GenData(Common),
    /// Train a variant, then write a checkpoint, metrics report and layer CSV.
    Train(Common),
    /// Evaluate a checkpoint on a dataset (MP always disabled).
    Eval(EvalArgs),
    /// Layer-wise consistency table for a checkpoint.
    Analyze(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample refinement-threshold bounds across noise levels.
    RefineStudy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: config `out`, else `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file; defaults to the config's dataset or its synth section.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Evaluate every scene instead of the held-out split.
    #[arg(long)]
    pub all: bool,
}

/// A failure with its exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl CliError {
    fn new(code: i32, message: impl std::fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new(EXIT_CONFIG, e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_IO, e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let code = match e {
            DataError::Config { .. } | DataError::Placement { .. } => EXIT_CONFIG,
            DataError::Version { .. } => EXIT_COMPAT,
            DataError::Format { .. } | DataError::Mask(_) | DataError::Io(_) => EXIT_IO,
        };
        Self::new(code, e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io(_) => EXIT_IO,
            _ => EXIT_COMPAT,
        };
        Self::new(code, e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let code = match e {
            EvalError::Empty(_) | EvalError::Incompatible(_) => EXIT_COMPAT,
            EvalError::Pool(_) => EXIT_IO,
            _ => EXIT_NUMERIC,
        };
        Self::new(code, e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Config(_) => EXIT_CONFIG,
            TrainError::EmptySplit => EXIT_COMPAT,
            _ => EXIT_NUMERIC,
        };
        Self::new(code, e)
    }
}

impl From<StudyError> for CliError {
    fn from(e: StudyError) -> Self {
        let code = match e {
            StudyError::Config { .. } => EXIT_CONFIG,
            StudyError::Metrics(_) => EXIT_NUMERIC,
        };
        Self::new(code, e)
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Config file plus command-line overrides, not yet validated.
fn resolve(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_json(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(v) = c.variant {
        cfg.variant = v;
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

/// Loads the configured dataset file or generates one from `synth`; the
/// config's `synth` section is replaced by the dataset's own.
fn dataset_for(cfg: &mut RunConfig, path: Option<&Path>) -> CliResult<Dataset> {
    let path = path.map(Path::to_path_buf).or_else(|| cfg.dataset.clone());
    let ds = match path {
        Some(p) => Dataset::load(&p).map_err(|e| {
            let code = CliError::from(e).code;
            CliError::new(code, format!("{}: dataset unreadable", p.display()))
        })?,
        None => Dataset::generate(&cfg.synth)?,
    };
    cfg.synth = ds.config.clone();
    Ok(ds)
}

fn gen_data(c: &Common) -> CliResult<String> {
    let mut cfg = resolve(c)?;
    if let Some(s) = c.seed {
        cfg.synth.seed = s;
    }
    let ds = Dataset::generate(&cfg.synth)?;
    let text = ds.to_text();
    let path = out_dir(&cfg)?.join(DATASET_FILE);
    write(&path, &text)?;
    Ok(format!(
        "scenes: {}\nsha256: {}\nfile: {}\n",
        ds.scenes.len(),
        sha256_hex(text.as_bytes()),
        path.display()
    ))
}

fn cmd_train(c: &Common) -> CliResult<String> {
    let mut cfg = resolve(c)?;
    let ds = dataset_for(&mut cfg, None)?;
    cfg.validate()?;
    let dir = out_dir(&cfg)?;
    write(&dir.join(CONFIG_ECHO_FILE), cfg.to_json() + "\n")?;
    let every = cfg.train.log_every;
    let outcome = train(&cfg, &ds, |s| {
        if s.step % every == 0 || s.step + 1 == cfg.train.steps {
            log::info!("step {:>5}  loss {:.6}  lr {:.3e}", s.step, s.loss, s.lr);
        }
    })?;
    checkpoint::save(&outcome.params, &dir.join(CHECKPOINT_FILE))?;
    let (_, held) = split(&ds, cfg.train.eval_fraction);
    let scenes: Vec<usize> = held.collect();
    let eval = evaluate(&outcome.params, &ds, &scenes, &cfg.loss)?;
    let report = MetricsReport {
        variant: cfg.variant.to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        steps: cfg.train.steps,
        epoch_losses: outcome.epoch_losses,
        eval,
    };
    let text = report.to_text();
    write(&dir.join(METRICS_FILE), &text)?;
    write(&dir.join(LAYERS_FILE), report.to_csv())?;
    Ok(text)
}

/// Checkpoint, dataset, selected scenes and the resolved config.
fn eval_inputs(a: &EvalArgs) -> CliResult<(crate::decoder::DecoderParams, Dataset, Vec<usize>, RunConfig, String)> {
    let mut cfg = resolve(&a.common)?;
    let ckpt_bytes = fs::read(&a.checkpoint)
        .map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", a.checkpoint.display())))?;
    let params = checkpoint::from_reader(&ckpt_bytes[..])?;
    let ds = dataset_for(&mut cfg, a.dataset.as_deref())?;
    let scenes: Vec<usize> = if a.all {
        (0..ds.scenes.len()).collect()
    } else {
        split(&ds, cfg.train.eval_fraction).1.collect()
    };
    if scenes.is_empty() {
        return Err(CliError::new(EXIT_COMPAT, "dataset has no scenes to evaluate"));
    }
    Ok((params, ds, scenes, cfg, sha256_hex(&ckpt_bytes)))
}

fn cmd_eval(a: &EvalArgs) -> CliResult<String> {
    let (params, ds, scenes, cfg, ckpt_hash) = eval_inputs(a)?;
    let eval = evaluate(&params, &ds, &scenes, &cfg.loss)?;
    let report = MetricsReport {
        variant: cfg.variant.to_string(),
        seed: cfg.seed,
        config_hash: ckpt_hash,
        steps: 0,
        epoch_losses: Vec::new(),
        eval,
    };
    let dir = out_dir(&cfg)?;
    let text = report.to_text();
    write(&dir.join(METRICS_FILE), &text)?;
    write(&dir.join(LAYERS_FILE), report.to_csv())?;
    Ok(text)
}

fn cmd_analyze(a: &EvalArgs) -> CliResult<String> {
    let (params, ds, scenes, cfg, _) = eval_inputs(a)?;
    // clean GT masks and labels for the MP rows
    let mp = MpConfig {
        num_queries: cfg.mp.num_queries,
        label_flip_ratio: 0.0,
        noise: NoiseSpec {
            kind: NoiseKind::None,
            ..cfg.mp.noise
        },
        ..Default::default()
    };
    let result = analyze(&params, &ds, &scenes, &mp, &cfg.loss, cfg.seed)?;
    let dir = out_dir(&cfg)?;
    let table = analysis_table(&result);
    write(&dir.join(ANALYSIS_TABLE_FILE), &table)?;
    write(&dir.join(ANALYSIS_CSV_FILE), analysis_csv(&result))?;
    Ok(table)
}

fn cmd_grad_check(seed: u64) -> CliResult<String> {
    let results = gradsuite::run_suite(seed);
    let mut s = String::new();
    for r in &results {
        s.push_str(&format!(
            "{:<24} {:.3e} {}\n",
            r.name,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::new(EXIT_CHECK, format!("{s}{failed} gradient check(s) failed")));
    }
    s.push_str(&format!("all {} checks passed (tolerance {:e})\n", results.len(), gradsuite::TOLERANCE));
    Ok(s)
}

fn cmd_refine_study(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> CliResult<String> {
    let mut cfg: StudyConfig = match config {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| CliError::new(EXIT_CONFIG, format!("study config: {e}")))?,
        None => StudyConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let samples = study::run_study(&cfg)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    write(&dir.join(STUDY_FILE), study::to_csv(&samples))?;
    let mut s = String::from("sigma,samples,condition,guaranteed,threshold_exists,counterexamples\n");
    for r in study::summarize(&cfg, &samples) {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sigma, r.samples, r.condition, r.guaranteed, r.exists, r.counterexamples
        ));
    }
    Ok(s)
}

pub fn execute(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::GradCheck { seed } => cmd_grad_check(*seed),
        Command::RefineStudy { config, seed, out } => cmd_refine_study(config.as_deref(), *seed, out.as_deref()),
    }
}

/// Parses `args`, runs the command, prints its output and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
