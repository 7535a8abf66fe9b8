//! Command-line front end. Every command resolves a flat configuration,
//! writes its outputs plus a `resolved_config` snapshot into an output
//! directory, and prints one `key=value` summary line per result on stdout.

mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::{Command as Process, Stdio};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_override, parse_pairs, parse_seed_list, ConfigKey, RunConfig};
use crate::error::Error;

pub use commands::{guided_config, offline_config, schema};

pub const RESOLVED_CONFIG: &str = "resolved_config";

/// Exit status: 0 success, 1 usage error, 2 runtime or assertion failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

pub(crate) fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "stateguide", version, about = "Action-free offline pretraining of state policies and guided online RL")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run several seeds as parallel worker processes, e.g. `1..5` or `1,3,7`;
    /// each writes to `<out>/seed_<n>`.
    #[arg(long, conflicts_with = "seed")]
    pub seeds: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out a behaviour policy and write a dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        env: Option<String>,
        /// random, medium, expert or mixture.
        #[arg(long)]
        quality: Option<String>,
        /// Number of transitions.
        #[arg(long)]
        n: Option<usize>,
        /// Strip action labels.
        #[arg(long)]
        action_free: bool,
        /// Trained expert actor file (needed for every quality except random).
        #[arg(long)]
        expert: Option<String>,
    },
    /// Train a TD3 expert and record random/expert reference returns.
    TrainExpert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train the frozen expert inverse dynamics model used by `eval`.
    TrainIdm {
        #[command(flatten)]
        common: Common,
        /// Labelled dataset file(s), comma separated.
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Pretrain a state policy (or a baseline) on offline data.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<String>,
        /// oso, decqn_n, bc_delta, bc_sprime, bc_diff or bc_a.
        #[arg(long)]
        algo: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Online training, optionally guided by a pretrained state policy.
    Guide {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        model: Option<String>,
        /// Offline dataset used for IDM relabelling.
        #[arg(long)]
        data: Option<String>,
        /// Plain online agent without guidance.
        #[arg(long)]
        no_guide: bool,
        /// td3 or decqn.
        #[arg(long)]
        agent: Option<String>,
        #[arg(long)]
        total_steps: Option<u64>,
        #[arg(long)]
        beta_max: Option<f64>,
        #[arg(long)]
        beta_min: Option<f64>,
        #[arg(long)]
        beta_decrement: Option<f64>,
        /// Steps between β decrements (0 derives it from the budget).
        #[arg(long)]
        beta_interval: Option<u64>,
        /// Keep β constant at this value after warm-up.
        #[arg(long)]
        beta_fixed: Option<f64>,
    },
    /// Roll out a pretrained model through the expert IDM.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        expert_idm: Option<String>,
        /// Reference scores file (`env random expert` lines).
        #[arg(long)]
        scores: Option<String>,
        /// return, diff_error or both.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Row label in the summary (defaults to the model kind).
        #[arg(long)]
        group: Option<String>,
    },
    /// Check the discretisation bound on a Gaussian increment MDP.
    TheoryCheck {
        #[command(flatten)]
        common: Common,
        /// State dimension.
        #[arg(long = "M")]
        m: Option<usize>,
        /// Comma-separated bin counts.
        #[arg(long)]
        k_list: Option<String>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
    },
}

fn push<T: ToString>(out: &mut Vec<(String, String)>, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        out.push((key.to_string(), v.to_string()));
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainExpert { .. } => "train-expert",
            Command::TrainIdm { .. } => "train-idm",
            Command::Pretrain { .. } => "pretrain",
            Command::Guide { .. } => "guide",
            Command::Eval { .. } => "eval",
            Command::TheoryCheck { .. } => "theory-check",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::TrainExpert { common, .. }
            | Command::TrainIdm { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Guide { common, .. }
            | Command::Eval { common, .. }
            | Command::TheoryCheck { common, .. } => common,
        }
    }

    /// Dedicated flags expressed as configuration overrides.
    fn flag_overrides(&self) -> Vec<(String, String)> {
        let mut o = Vec::new();
        push(&mut o, "seed", &self.common().seed);
        match self {
            Command::GenData { env, quality, n, action_free, expert, .. } => {
                push(&mut o, "env", env);
                push(&mut o, "quality", quality);
                push(&mut o, "n", n);
                push(&mut o, "expert", expert);
                if *action_free {
                    o.push(("action_free".into(), "true".into()));
                }
            }
            Command::TrainExpert { env, steps, .. } => {
                push(&mut o, "env", env);
                push(&mut o, "total_steps", steps);
            }
            Command::TrainIdm { data, steps, .. } => {
                push(&mut o, "data", data);
                push(&mut o, "steps", steps);
            }
            Command::Pretrain { data, algo, steps, alpha, .. } => {
                push(&mut o, "data", data);
                push(&mut o, "algo", algo);
                push(&mut o, "steps", steps);
                push(&mut o, "alpha", alpha);
            }
            Command::Guide {
                env,
                model,
                data,
                no_guide,
                agent,
                total_steps,
                beta_max,
                beta_min,
                beta_decrement,
                beta_interval,
                beta_fixed,
                ..
            } => {
                push(&mut o, "env", env);
                push(&mut o, "model", model);
                push(&mut o, "data", data);
                push(&mut o, "agent", agent);
                push(&mut o, "total_steps", total_steps);
                push(&mut o, "beta_max", beta_max);
                push(&mut o, "beta_min", beta_min);
                push(&mut o, "beta_decrement", beta_decrement);
                push(&mut o, "beta_interval", beta_interval);
                push(&mut o, "beta_fixed", beta_fixed);
                if *no_guide {
                    o.push(("guide".into(), "false".into()));
                }
            }
            Command::Eval { env, model, expert_idm, scores, metric, episodes, group, .. } => {
                push(&mut o, "env", env);
                push(&mut o, "model", model);
                push(&mut o, "expert_idm", expert_idm);
                push(&mut o, "scores", scores);
                push(&mut o, "metric", metric);
                push(&mut o, "episodes", episodes);
                push(&mut o, "group", group);
            }
            Command::TheoryCheck { m, k_list, gamma, sigma, .. } => {
                push(&mut o, "dims", m);
                push(&mut o, "k_list", k_list);
                push(&mut o, "gamma", gamma);
                push(&mut o, "sigma", sigma);
            }
        }
        o
    }

    /// Defaults, then the config file, then `--set`, then dedicated flags.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let common = self.common();
        let mut layers = Vec::new();
        if let Some(path) = &common.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
            layers.push(parse_pairs(&text).map_err(usage)?);
        }
        layers.push(common.set.iter().map(|s| parse_override(s)).collect::<Result<_, _>>().map_err(usage)?);
        layers.push(self.flag_overrides());
        let keys: &[ConfigKey] = schema(self.name());
        RunConfig::resolve(self.name(), keys, &layers).map_err(usage)
    }
}

/// Parse `args` (including the program name) and run, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let raw: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&raw) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command, &raw) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command, raw: &[OsString]) -> CliResult<()> {
    match &command.common().seeds {
        Some(list) => fan_out(command, raw, list),
        None => {
            let config = command.resolve()?;
            commands::run_single(&config, &command.common().out, command.common().force)
        }
    }
}

/// Arguments for one worker: the parent's arguments without `--seeds` and
/// `--out`, plus the worker's own seed and directory.
pub fn worker_args(raw: &[OsString], seed: u64, out: &Path) -> Vec<OsString> {
    let mut args = Vec::new();
    let mut skip_next = false;
    for tok in raw.iter().skip(1) {
        if skip_next {
            skip_next = false;
            continue;
        }
        let s = tok.to_string_lossy();
        if s == "--seeds" || s == "--out" {
            skip_next = true;
            continue;
        }
        if s.starts_with("--seeds=") || s.starts_with("--out=") {
            continue;
        }
        args.push(tok.clone());
    }
    args.extend(["--seed".into(), seed.to_string().into(), "--out".into(), out.as_os_str().to_owned()]);
    args
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn fan_out(command: &Command, raw: &[OsString], list: &str) -> CliResult<()> {
    let seeds = parse_seed_list(list).map_err(usage)?;
    // Validate the configuration once before spawning anything.
    command.resolve()?;
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let out = &command.common().out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let mut children = Vec::new();
    for &seed in &seeds {
        let child = Process::new(&exe)
            .args(worker_args(raw, seed, &seed_dir(out, seed)))
            .stdin(Stdio::null())
            .spawn()
            .map_err(|e| Error::io(exe.display().to_string(), e))?;
        children.push((seed, child));
    }
    let mut failed = Vec::new();
    let mut usage_failure = false;
    for (seed, mut child) in children {
        let status = child.wait().map_err(|e| Error::io("worker process", e))?;
        if !status.success() {
            usage_failure |= status.code() == Some(1);
            failed.push(seed);
        }
    }
    if !failed.is_empty() {
        let msg = format!("seeds {failed:?} failed");
        return Err(if usage_failure { CliError::Usage(msg) } else { CliError::Runtime(Error::InvalidArgument(msg)) });
    }
    commands::aggregate_seeds(command.name(), out, &seeds, command.common().force)
}
