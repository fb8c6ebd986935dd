//! Command-line entry points. [`parse_and_validate`] resolves the config
//! before anything runs; [`execute`] performs the command.

use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cgrpa::Learner;
use crate::config::{load_with_overrides, ConfigError, ExperimentConfig};
use crate::flexdiff::replay::{replay_csv, ReplayError};
use crate::harness::{evaluate, sweep, train, GridPoint, HarnessError};
use crate::nn::checkpoint::{read_tensors, CheckpointError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "clmarl", version, arg_required_else_help = true)]
#[command(about = "Curriculum multi-agent training on a grid battle")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML config; defaults are used for anything it omits.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set flexdiff.window_len=10`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Train one run per seed.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seeds to run; defaults to `run.seeds`.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Greedy evaluation of a saved checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `run.target_difficulty`.
        #[arg(long)]
        difficulty: Option<i32>,
        /// Defaults to `run.eval_rollouts`.
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-run the scheduler over the evaluation columns of a metrics CSV.
    ReplayScheduler {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        metrics: PathBuf,
        /// Trace destination; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train the cartesian product of the given axes for every seed.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// `section.key=v1,v2,...`. Repeatable.
        #[arg(long = "axis", value_name = "SECTION.KEY=V1,V2")]
        axes: Vec<String>,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Print the tensor table of a checkpoint directory.
    InspectCheckpoint { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Train { seeds: Vec<u64>, out: PathBuf },
    Eval { checkpoint: PathBuf, difficulty: i32, rollouts: usize, seed: u64 },
    ReplayScheduler { metrics: PathBuf, out: Option<PathBuf> },
    Sweep { grid: Vec<GridPoint>, seeds: Vec<u64>, out: PathBuf },
    InspectCheckpoint { dir: PathBuf },
}

/// A parsed command with its fully resolved config.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub action: Action,
    pub config: ExperimentConfig,
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Help or version output; not a failure.
    #[error("{0}")]
    Info(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Info(_) => EXIT_OK,
            CliError::Usage(_) | CliError::Config(_) => EXIT_CONFIG,
            CliError::Harness(HarnessError::Config(_)) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

fn parse_axis(spec: &str) -> Result<(String, Vec<String>), CliError> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("axis `{spec}` must look like section.key=v1,v2")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Usage(format!("axis `{spec}` has no values")));
    }
    Ok((key.trim().to_string(), values))
}

fn resolve_args(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    Ok(load_with_overrides(args.config.as_deref(), &args.overrides)?)
}

/// Parses `argv` (including the program name) and resolves the config.
pub fn parse_and_validate<I, T>(argv: I) -> Result<Command, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| {
        use clap::error::ErrorKind;
        let text = e.render().to_string();
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CliError::Info(text),
            _ => CliError::Usage(text),
        }
    })?;
    let command = match cli.command {
        Sub::Train { config, seeds, out } => {
            let config = resolve_args(&config)?;
            let seeds = if seeds.is_empty() { config.run.seeds.clone() } else { seeds };
            Command {
                action: Action::Train { seeds, out },
                config,
            }
        }
        Sub::Eval {
            config,
            checkpoint,
            difficulty,
            rollouts,
            seed,
        } => {
            let mut args = config;
            if args.config.is_none() {
                // a checkpoint saved by `train` sits next to its run's config
                let beside = checkpoint.parent().map(|p| p.join("config.toml"));
                args.config = beside.filter(|p| p.exists());
            }
            let config = resolve_args(&args)?;
            let difficulty = difficulty.unwrap_or(config.run.target_difficulty);
            if !(1..=10).contains(&difficulty) {
                return Err(CliError::Usage(format!("difficulty {difficulty} outside 1..=10")));
            }
            let rollouts = rollouts.unwrap_or(config.run.eval_rollouts);
            if rollouts == 0 {
                return Err(CliError::Usage("rollouts must be at least 1".into()));
            }
            Command {
                action: Action::Eval {
                    checkpoint,
                    difficulty,
                    rollouts,
                    seed,
                },
                config,
            }
        }
        Sub::ReplayScheduler { config, metrics, out } => Command {
            action: Action::ReplayScheduler { metrics, out },
            config: resolve_args(&config)?,
        },
        Sub::Sweep {
            config,
            axes,
            seeds,
            out,
        } => {
            let config = resolve_args(&config)?;
            let axes = axes.iter().map(|a| parse_axis(a)).collect::<Result<Vec<_>, _>>()?;
            let grid = GridPoint::product(&axes);
            for point in &grid {
                config.with_overrides(&point.overrides)?;
            }
            let seeds = if seeds.is_empty() { config.run.seeds.clone() } else { seeds };
            Command {
                action: Action::Sweep { grid, seeds, out },
                config,
            }
        }
        Sub::InspectCheckpoint { dir } => Command {
            action: Action::InspectCheckpoint { dir },
            config: ExperimentConfig::default(),
        },
    };
    Ok(command)
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn execute<W: Write>(cmd: &Command, out: &mut W) -> Result<(), CliError> {
    let cfg = &cmd.config;
    match &cmd.action {
        Action::Train { seeds, out: dir } => {
            let multi = seeds.len() > 1;
            for &seed in seeds {
                let run_dir = if multi { dir.join(format!("seed-{seed}")) } else { dir.clone() };
                let r = train(cfg, seed, Some(&run_dir))?;
                let last = r.rows.last();
                writeln!(
                    out,
                    "seed {seed}: cycles={} normalized_win_rate={:.4} final_difficulty={} milestone_step={} dir={}",
                    r.rows.len(),
                    r.normalized_win_rate,
                    last.map_or(cfg.run.target_difficulty, |x| x.difficulty),
                    r.milestone_step.map_or_else(|| "-".to_string(), |s| s.to_string()),
                    run_dir.display()
                )?;
            }
        }
        Action::Eval {
            checkpoint,
            difficulty,
            rollouts,
            seed,
        } => {
            let env = &cfg.env;
            let mut learner = Learner::new(
                cfg.learner.clone(),
                env.obs_dim(),
                env.state_dim(),
                env.n_allies,
                env.n_actions(),
                0,
            )
            .map_err(HarnessError::from)?;
            learner.load(checkpoint)?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let seeds: Vec<u64> = (0..*rollouts).map(|_| rng.next_u64()).collect();
            let sample = evaluate(learner.online(), env, *difficulty, &seeds)?;
            writeln!(
                out,
                "difficulty={difficulty} rollouts={rollouts} win_rate={:.4} mean_return={:.4}",
                sample.win_rate, sample.mean_return
            )?;
        }
        Action::ReplayScheduler { metrics, out: dest } => {
            let input = BufReader::new(File::open(metrics)?);
            let decisions = match dest {
                Some(p) => replay_csv(input, File::create(p)?, &cfg.flexdiff)?,
                None => replay_csv(input, &mut *out, &cfg.flexdiff)?,
            };
            if let (Some(p), Some(last)) = (dest, decisions.last()) {
                writeln!(
                    out,
                    "replayed {} cycles, final difficulty {} -> {}",
                    decisions.len(),
                    last.difficulty,
                    p.display()
                )?;
            }
        }
        Action::Sweep { grid, seeds, out: dir } => {
            let (runs, summaries) = sweep(cfg, grid, seeds, dir)?;
            for s in &summaries {
                writeln!(
                    out,
                    "{} [{}]: runs={} failures={} mean={}",
                    if s.point.is_empty() { "base" } else { &s.point },
                    s.config_hash,
                    s.runs,
                    s.failures,
                    s.mean.map_or_else(|| "-".to_string(), |m| format!("{m:.4}"))
                )?;
            }
            let failed = runs.iter().filter(|r| r.status != "ok").count();
            writeln!(out, "{} runs, {failed} failed, summary in {}", runs.len(), dir.join("summary.csv").display())?;
        }
        Action::InspectCheckpoint { dir } => {
            let tensors = read_tensors(BufReader::new(File::open(dir.join("params.bin"))?))?;
            let mut total = 0;
            for t in &tensors {
                let n = t.values.len();
                total += n;
                let norm = t.values.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dims: Vec<String> = t.dims.iter().map(|d| d.to_string()).collect();
                writeln!(out, "{:<24} {:>10} values={n:<7} l2={norm:.6}", t.name, dims.join("x"))?;
            }
            writeln!(out, "{} tensors, {total} values", tensors.len())?;
            let manifest = dir.join("manifest.txt");
            if manifest.exists() && fs::read_to_string(&manifest)?.lines().count() < tensors.len() {
                return Err(CliError::Usage(format!("{} does not cover every tensor", manifest.display())));
            }
        }
    }
    Ok(())
}

/// Full entry point: parses, prints the version and config hash, executes.
/// Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cmd = match parse_and_validate(argv) {
        Ok(c) => c,
        Err(e) => {
            match &e {
                CliError::Info(text) => print!("{text}"),
                other => eprintln!("error: {other}"),
            }
            return e.exit_code();
        }
    };
    eprintln!("clmarl {VERSION} config {}", cmd.config.hash());
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match execute(&cmd, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
