use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{key, ConfigKey, RunConfig};
use crate::critic::TdLoss;
use crate::discretise::{BinMode, DiscretiserConfig};
use crate::env::{
    generate_dataset, load_dataset, make_behaviour_policy, save_dataset, strip_actions, Dataset, EnvSpec,
    Quality, RandomPolicy,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, load_expert_idm, rollout_state_policy, save_expert_idm, summary_csv, summary_table,
    train_expert_idm, ExpertIdmConfig, ReferenceScores, ScoresFile,
};
use crate::offline::{load_model, loss_trace_csv, save_model, train_model, ModelKind, OfflineConfig};
use crate::online::{
    curve_csv, evaluate_policy, guided_train, idm_trace_csv, load_actor, save_actor, save_agent, save_idm,
    train_expert, AgentKind, DecqnConfig, GuidanceSchedule, GuidedConfig, Td3Config,
};
use crate::rng::Rng;
use crate::theory::{check_bound, IncrementMdp, IncrementMdpConfig};

use super::{usage, CliError, CliResult, RESOLVED_CONFIG};

pub const DATASET_FILE: &str = "dataset.afrl";
pub const ACTOR_FILE: &str = "actor.bin";
pub const SCORES_FILE: &str = "scores.txt";
pub const CURVE_FILE: &str = "curve.csv";
pub const EXPERT_IDM_FILE: &str = "expert_idm.eidm";
pub const MODEL_FILE: &str = "model.osom";
pub const LOSS_FILE: &str = "loss.csv";
pub const AGENT_FILE: &str = "agent.bin";
pub const BEST_AGENT_FILE: &str = "best_agent.bin";
pub const IDM_FILE: &str = "idm.bin";
pub const IDM_TRACE_FILE: &str = "idm_trace.csv";
pub const EPISODES_FILE: &str = "episodes.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const BOUND_FILE: &str = "bound.csv";

const GEN_DATA: &[ConfigKey] = &[
    key("env", "pointmass", "pointmass, pendulum, multipoint2 or multipoint4"),
    key("quality", "medium", "random, medium, expert or mixture"),
    key("n", "100000", "number of transitions"),
    key("seed", "0", "root seed"),
    key("action_free", "false", "strip action labels"),
    key("expert", "", "trained expert actor file"),
];

const TD3_KEYS: &[ConfigKey] = &[
    key("td3.hidden", "256,256,256", "actor and critic hidden widths"),
    key("td3.actor_lr", "0.0005", "actor learning rate"),
    key("td3.critic_lr", "0.0005", "critic learning rate"),
    key("td3.gamma", "0.99", "discount"),
    key("td3.tau", "0.001", "soft target update rate"),
    key("td3.policy_noise", "0.2", "target smoothing noise (fraction of half-range)"),
    key("td3.noise_clip", "0.5", "target smoothing clip (fraction of half-range)"),
    key("td3.policy_delay", "2", "critic updates per actor update"),
    key("td3.exploration_noise", "0.1", "exploration noise (fraction of half-range)"),
    key("td3.batch_size", "256", "minibatch size"),
    key("td3.start_steps", "1000", "initial uniform-random steps"),
];

const DECQN_KEYS: &[ConfigKey] = &[
    key("decqn.hidden", "256,256,256", "critic hidden widths"),
    key("decqn.lr", "0.0005", "learning rate"),
    key("decqn.gamma", "0.99", "discount"),
    key("decqn.tau", "0.001", "soft target update rate"),
    key("decqn.ensemble", "5", "critic ensemble size"),
    key("decqn.n_step", "3", "n-step return length"),
    key("decqn.bins", "3", "bins per action dimension (2 or 3)"),
    key("decqn.epsilon_start", "1", "initial exploration rate"),
    key("decqn.epsilon_min", "0.05", "minimum exploration rate"),
    key("decqn.epsilon_decay", "0.999", "per-step exploration decay"),
    key("decqn.batch_size", "256", "minibatch size"),
    key("decqn.td_loss", "huber", "mse or huber"),
];

const TRAIN_EXPERT: &[ConfigKey] = &[
    key("env", "pointmass", "environment"),
    key("seed", "0", "root seed"),
    key("total_steps", "1000000", "environment steps"),
    key("eval_interval", "10000", "steps between evaluations"),
    key("eval_episodes", "10", "episodes per evaluation"),
    key("replay_capacity", "1000000", "replay buffer size"),
    key("reference_episodes", "100", "episodes for the reference returns"),
];

const TRAIN_IDM: &[ConfigKey] = &[
    key("data", "", "labelled dataset file(s), comma separated"),
    key("seed", "0", "root seed"),
    key("steps", "20000", "gradient steps"),
    key("batch_size", "512", "minibatch size"),
    key("lr", "0.001", "learning rate"),
    key("hidden", "256,256,256", "hidden widths"),
    key("holdout", "0.1", "held-out fraction"),
    key("epsilon", "0.0001", "discretiser dead zone"),
    key("bins", "3", "2 or 3"),
];

const PRETRAIN: &[ConfigKey] = &[
    key("data", "", "dataset file"),
    key("algo", "oso", "oso, decqn_n, bc_delta, bc_sprime, bc_diff or bc_a"),
    key("seed", "0", "root seed"),
    key("steps", "200000", "gradient steps"),
    key("batch_size", "256", "minibatch size"),
    key("lr", "0.0001", "learning rate"),
    key("gamma", "0.99", "discount"),
    key("alpha", "5", "regulariser weight (ignored by decqn_n and BC)"),
    key("n_step", "1", "n-step return length"),
    key("ensemble", "5", "critic ensemble size"),
    key("hidden", "256,256,256", "hidden widths"),
    key("tau", "0.001", "soft target update rate"),
    key("temperature", "1", "bootstrap sampling temperature"),
    key("td_loss", "mse", "mse or huber"),
    key("log_every", "1000", "steps between loss records"),
    key("epsilon", "0.0001", "discretiser dead zone"),
    key("bins", "3", "2 or 3"),
];

const GUIDE_BASE: &[ConfigKey] = &[
    key("env", "pointmass", "environment"),
    key("model", "", "pretrained model file (required when guiding)"),
    key("data", "", "offline dataset for IDM relabelling"),
    key("seed", "0", "root seed"),
    key("guide", "true", "false runs the plain online agent"),
    key("agent", "td3", "td3 or decqn"),
    key("total_steps", "1000000", "environment steps"),
    key("eval_interval", "10000", "steps between evaluations"),
    key("eval_episodes", "10", "episodes per evaluation"),
    key("beta_max", "0.5", "initial switching probability"),
    key("beta_decrement", "0.1", "decrement per interval"),
    key("beta_interval", "0", "steps per decrement (0: 100000, or total/10 below 1M steps)"),
    key("beta_min", "0", "floor of the switching probability"),
    key("beta_fixed", "", "constant switching probability (overrides the schedule)"),
    key("idm_warmup", "1000", "steps before the offline branch may fire"),
    key("idm_min_fill", "256", "online transitions before IDM updates"),
    key("idm_batch", "512", "IDM minibatch size"),
    key("idm_lr", "0.001", "IDM learning rate"),
    key("idm_hidden", "256,256,256", "IDM hidden widths"),
    key("replay_capacity", "1000000", "replay buffer size"),
];

const EVAL: &[ConfigKey] = &[
    key("env", "pointmass", "environment"),
    key("model", "", "pretrained model file"),
    key("expert_idm", "", "expert IDM file"),
    key("scores", "", "reference scores file (needed for returns)"),
    key("metric", "both", "return, diff_error or both"),
    key("episodes", "10", "evaluation episodes"),
    key("seed", "0", "root seed"),
    key("group", "", "summary label (defaults to the model kind)"),
];

const THEORY: &[ConfigKey] = &[
    key("dims", "1", "state dimension M (1 to 3)"),
    key("k_list", "2,4,8,16", "bin counts, increasing"),
    key("gamma", "0.9", "discount"),
    key("sigma", "1", "transition noise"),
    key("half_width", "6", "grid half-width"),
    key("grid_step", "0.5", "grid spacing"),
    key("mean_low", "-1", "lower mean increment"),
    key("mean_high", "1", "upper mean increment"),
    key("lattice_points", "17", "lattice points per coordinate"),
    key("random_actions", "0", "extra random mean increments"),
    key("tolerance", "1e-8", "value iteration tolerance"),
    key("seed", "0", "seed for random actions"),
];

fn concat(parts: &[&[ConfigKey]]) -> &'static [ConfigKey] {
    Box::leak(parts.concat().into_boxed_slice())
}

/// Configuration keys accepted by `command`.
pub fn schema(command: &str) -> &'static [ConfigKey] {
    use std::sync::OnceLock;
    static TRAIN_EXPERT_ALL: OnceLock<&'static [ConfigKey]> = OnceLock::new();
    static GUIDE_ALL: OnceLock<&'static [ConfigKey]> = OnceLock::new();
    match command {
        "gen-data" => GEN_DATA,
        "train-expert" => TRAIN_EXPERT_ALL.get_or_init(|| concat(&[TRAIN_EXPERT, TD3_KEYS])),
        "train-idm" => TRAIN_IDM,
        "pretrain" => PRETRAIN,
        "guide" => GUIDE_ALL.get_or_init(|| concat(&[GUIDE_BASE, TD3_KEYS, DECQN_KEYS])),
        "eval" => EVAL,
        "theory-check" => THEORY,
        _ => &[],
    }
}

fn outputs(command: &str, config: &RunConfig) -> Vec<&'static str> {
    match command {
        "gen-data" => vec![DATASET_FILE],
        "train-expert" => vec![ACTOR_FILE, CURVE_FILE, SCORES_FILE],
        "train-idm" => vec![EXPERT_IDM_FILE],
        "pretrain" => vec![MODEL_FILE, LOSS_FILE],
        "guide" => {
            let mut v = vec![CURVE_FILE, AGENT_FILE, BEST_AGENT_FILE];
            if config.bool("guide").unwrap_or(true) {
                v.extend([IDM_FILE, IDM_TRACE_FILE]);
            }
            v
        }
        "eval" => vec![EPISODES_FILE, METRICS_FILE, SUMMARY_FILE],
        "theory-check" => vec![BOUND_FILE],
        _ => Vec::new(),
    }
}

/// Create `out` and refuse to clobber existing outputs unless forced.
fn prepare_out(out: &Path, files: &[&str], force: bool) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    if !force {
        for f in files.iter().chain(std::iter::once(&RESOLVED_CONFIG)) {
            let p = out.join(f);
            if p.exists() {
                return Err(usage(format!("{} already exists (use --force to overwrite)", p.display())));
            }
        }
    }
    Ok(())
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn summary_line(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

fn required<'a>(config: &'a RunConfig, name: &str) -> CliResult<&'a str> {
    config
        .opt_str(name)
        .map_err(usage)?
        .ok_or_else(|| usage(format!("`{name}` must be set for {}", config.command)))
}

pub(super) fn run_single(config: &RunConfig, out: &Path, force: bool) -> CliResult<()> {
    let command = config.command.as_str();
    prepare_out(out, &outputs(command, config), force)?;
    write_text(out.join(RESOLVED_CONFIG), &config.render())?;
    let line = match command {
        "gen-data" => gen_data(config, out)?,
        "train-expert" => cmd_train_expert(config, out)?,
        "train-idm" => train_idm(config, out)?,
        "pretrain" => pretrain(config, out)?,
        "guide" => guide(config, out)?,
        "eval" => eval(config, out)?,
        "theory-check" => theory_check(config, out)?,
        other => return Err(usage(format!("unknown command {other}"))),
    };
    println!("command={command} {line}");
    Ok(())
}

fn discretiser(config: &RunConfig) -> Result<DiscretiserConfig> {
    let d = match BinMode::from_bins(config.parse("bins")?)? {
        BinMode::Three => DiscretiserConfig::three_bin(config.parse("epsilon")?),
        BinMode::Two => DiscretiserConfig::two_bin(),
    };
    d.validate()?;
    Ok(d)
}

fn gen_data(config: &RunConfig, out: &Path) -> CliResult<String> {
    let spec = EnvSpec::from_name(config.str("env").map_err(usage)?).map_err(usage)?;
    let quality = Quality::parse(config.str("quality").map_err(usage)?).map_err(usage)?;
    let n: usize = config.parse("n").map_err(usage)?;
    let seed: u64 = config.parse("seed").map_err(usage)?;
    let action_free = config.bool("action_free").map_err(usage)?;
    let expert = match config.opt_str("expert").map_err(usage)? {
        Some(path) => Some(load_actor(path, &spec)?),
        None => None,
    };
    let mut policy = make_behaviour_policy(&spec, quality, expert)
        .map_err(|e| usage(format!("{e}; then pass its actor file with --expert <out>/{ACTOR_FILE}")))?;
    let mut ds = generate_dataset(&spec, &mut policy, quality, n, &mut Rng::new(seed))?;
    if action_free {
        ds = strip_actions(&ds);
    }
    let path = out.join(DATASET_FILE);
    save_dataset(&ds, &path)?;
    let returns = ds.episode_returns(spec.horizon);
    let mean = if returns.is_empty() { f64::NAN } else { returns.iter().sum::<f64>() / returns.len() as f64 };
    Ok(summary_line(&[
        ("env", spec.name.clone()),
        ("quality", quality.name().into()),
        ("seed", seed.to_string()),
        ("n", ds.len().to_string()),
        ("episodes", ds.episode_starts().len().to_string()),
        ("action_free", action_free.to_string()),
        ("mean_return", mean.to_string()),
        ("path", path.display().to_string()),
    ]))
}

fn td3_config(config: &RunConfig) -> Result<Td3Config> {
    Ok(Td3Config {
        hidden: config.list("td3.hidden")?,
        actor_lr: config.parse("td3.actor_lr")?,
        critic_lr: config.parse("td3.critic_lr")?,
        gamma: config.parse("td3.gamma")?,
        tau: config.parse("td3.tau")?,
        policy_noise: config.parse("td3.policy_noise")?,
        noise_clip: config.parse("td3.noise_clip")?,
        policy_delay: config.parse("td3.policy_delay")?,
        exploration_noise: config.parse("td3.exploration_noise")?,
        batch_size: config.parse("td3.batch_size")?,
        start_steps: config.parse("td3.start_steps")?,
    })
}

fn decqn_config(config: &RunConfig) -> Result<DecqnConfig> {
    Ok(DecqnConfig {
        hidden: config.list("decqn.hidden")?,
        learning_rate: config.parse("decqn.lr")?,
        gamma: config.parse("decqn.gamma")?,
        tau: config.parse("decqn.tau")?,
        ensemble: config.parse("decqn.ensemble")?,
        n_step: config.parse("decqn.n_step")?,
        mode: BinMode::from_bins(config.parse("decqn.bins")?)?,
        epsilon_start: config.parse("decqn.epsilon_start")?,
        epsilon_min: config.parse("decqn.epsilon_min")?,
        epsilon_decay: config.parse("decqn.epsilon_decay")?,
        batch_size: config.parse("decqn.batch_size")?,
        loss: TdLoss::parse(config.str("decqn.td_loss")?)?,
    })
}

fn cmd_train_expert(config: &RunConfig, out: &Path) -> CliResult<String> {
    let spec = EnvSpec::from_name(config.str("env").map_err(usage)?).map_err(usage)?;
    let seed: u64 = config.parse("seed").map_err(usage)?;
    let reference_episodes: usize = config.parse("reference_episodes").map_err(usage)?;
    if reference_episodes == 0 {
        return Err(usage("reference_episodes must be >= 1"));
    }
    let guided = GuidedConfig {
        total_steps: config.parse("total_steps").map_err(usage)?,
        eval_interval: config.parse("eval_interval").map_err(usage)?,
        eval_episodes: config.parse("eval_episodes").map_err(usage)?,
        replay_capacity: config.parse("replay_capacity").map_err(usage)?,
        td3: td3_config(config).map_err(usage)?,
        guide: false,
        ..GuidedConfig::default()
    };
    guided.validate().map_err(usage)?;
    let mut rng = Rng::new(seed);
    let (actor, curve) = train_expert(&spec, &guided, &mut rng.fork("expert"))?;
    let mut reference_rng = rng.fork("reference");
    let random = mean(&evaluate_policy(&spec, &mut RandomPolicy::new(&spec), reference_episodes, &mut reference_rng)?);
    let mut greedy = actor.clone();
    let expert = mean(&evaluate_policy(&spec, &mut greedy, reference_episodes, &mut reference_rng)?);
    save_actor(&actor, &spec.name, out.join(ACTOR_FILE))?;
    write_text(out.join(CURVE_FILE), &curve_csv(&curve))?;
    let mut scores = ScoresFile::default();
    let reference = ReferenceScores::new(random, expert).map_err(|e| {
        CliError::Runtime(Error::InvalidArgument(format!(
            "expert return {expert} does not exceed random return {random}; train longer ({e})"
        )))
    })?;
    scores.scores.insert(spec.name.clone(), reference);
    scores.save(out.join(SCORES_FILE))?;
    Ok(summary_line(&[
        ("env", spec.name.clone()),
        ("seed", seed.to_string()),
        ("random_return", random.to_string()),
        ("expert_return", expert.to_string()),
        ("actor", out.join(ACTOR_FILE).display().to_string()),
    ]))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn load_datasets(list: &str) -> Result<Dataset> {
    let mut paths = list.split(',').map(str::trim).filter(|p| !p.is_empty());
    let first = paths.next().ok_or(Error::Empty("dataset list"))?;
    let mut ds = load_dataset(first)?;
    for p in paths {
        ds.extend_from(&load_dataset(p)?)?;
    }
    Ok(ds)
}

fn train_idm(config: &RunConfig, out: &Path) -> CliResult<String> {
    let data = required(config, "data")?.to_string();
    let idm_config = ExpertIdmConfig {
        steps: config.parse("steps").map_err(usage)?,
        batch_size: config.parse("batch_size").map_err(usage)?,
        learning_rate: config.parse("lr").map_err(usage)?,
        hidden: config.list("hidden").map_err(usage)?,
        holdout_fraction: config.parse("holdout").map_err(usage)?,
        discretiser: discretiser(config).map_err(usage)?,
    };
    let seed: u64 = config.parse("seed").map_err(usage)?;
    let ds = load_datasets(&data)?;
    let idm = train_expert_idm(&ds, &idm_config, &mut Rng::new(seed))?;
    let path = out.join(EXPERT_IDM_FILE);
    save_expert_idm(&idm, &path)?;
    Ok(summary_line(&[
        ("seed", seed.to_string()),
        ("n", ds.len().to_string()),
        ("code_heldout_l1", idm.code_heldout_total().to_string()),
        ("continuous_heldout_l1", idm.continuous_heldout.iter().sum::<f64>().to_string()),
        ("path", path.display().to_string()),
    ]))
}

/// Offline pretraining settings from a resolved `pretrain` configuration.
pub fn offline_config(config: &RunConfig) -> Result<OfflineConfig> {
    let c = OfflineConfig {
        steps: config.parse("steps")?,
        batch_size: config.parse("batch_size")?,
        learning_rate: config.parse("lr")?,
        gamma: config.parse("gamma")?,
        alpha: config.parse("alpha")?,
        n_step: config.parse("n_step")?,
        discretiser: discretiser(config)?,
        ensemble: config.parse("ensemble")?,
        hidden: config.list("hidden")?,
        tau: config.parse("tau")?,
        temperature: config.parse("temperature")?,
        loss: TdLoss::parse(config.str("td_loss")?)?,
        log_every: config.parse("log_every")?,
    };
    c.validate()?;
    Ok(c)
}

fn pretrain(config: &RunConfig, out: &Path) -> CliResult<String> {
    let data = required(config, "data")?.to_string();
    let kind = ModelKind::parse(config.str("algo").map_err(usage)?).map_err(usage)?;
    let offline = offline_config(config).map_err(usage)?;
    let seed: u64 = config.parse("seed").map_err(usage)?;
    let ds = load_dataset(&data)?;
    let model = train_model(kind, &ds, &offline, &mut Rng::new(seed))?;
    let path = out.join(MODEL_FILE);
    save_model(&model, &path)?;
    write_text(out.join(LOSS_FILE), &loss_trace_csv(&model.trace))?;
    let last = model.trace.last();
    Ok(summary_line(&[
        ("algo", kind.name().into()),
        ("seed", seed.to_string()),
        ("steps", offline.steps.to_string()),
        ("final_loss", last.map_or(f64::NAN, |r| r.loss).to_string()),
        ("final_reg_term", last.map_or(f64::NAN, |r| r.reg_term).to_string()),
        ("path", path.display().to_string()),
    ]))
}

/// Online-stage settings from a resolved `guide` configuration.
pub fn guided_config(config: &RunConfig) -> Result<GuidedConfig> {
    let total_steps: u64 = config.parse("total_steps")?;
    let schedule = match config.opt_str("beta_fixed")? {
        Some(b) => GuidanceSchedule::fixed(
            b.parse().map_err(|_| Error::InvalidArgument(format!("config key 'beta_fixed': cannot parse '{b}'")))?,
        ),
        None => {
            let interval: u64 = config.parse("beta_interval")?;
            let base = GuidanceSchedule::scaled(total_steps);
            GuidanceSchedule {
                beta_max: config.parse("beta_max")?,
                decrement: config.parse("beta_decrement")?,
                interval: if interval == 0 { base.interval } else { interval },
                beta_min: config.parse("beta_min")?,
            }
        }
    };
    let c = GuidedConfig {
        total_steps,
        eval_interval: config.parse("eval_interval")?,
        eval_episodes: config.parse("eval_episodes")?,
        schedule,
        guide: config.bool("guide")?,
        idm_warmup: config.parse("idm_warmup")?,
        idm_min_fill: config.parse("idm_min_fill")?,
        idm_batch: config.parse("idm_batch")?,
        idm_lr: config.parse("idm_lr")?,
        idm_hidden: config.list("idm_hidden")?,
        replay_capacity: config.parse("replay_capacity")?,
        agent: AgentKind::parse(config.str("agent")?)?,
        td3: td3_config(config)?,
        decqn: decqn_config(config)?,
    };
    c.validate()?;
    Ok(c)
}

fn guide(config: &RunConfig, out: &Path) -> CliResult<String> {
    let spec = EnvSpec::from_name(config.str("env").map_err(usage)?).map_err(usage)?;
    let guided = guided_config(config).map_err(usage)?;
    let seed: u64 = config.parse("seed").map_err(usage)?;
    let model = if guided.guide {
        Some(load_model(required(config, "model")?)?)
    } else {
        None
    };
    let offline = match config.opt_str("data").map_err(usage)? {
        Some(p) if guided.guide => Some(load_dataset(p)?),
        _ => None,
    };
    let run = guided_train(&spec, model.as_ref(), offline.as_ref(), &guided, &mut Rng::new(seed))?;
    write_text(out.join(CURVE_FILE), &curve_csv(&run.curve))?;
    save_agent(&run.agent, &spec.name, out.join(AGENT_FILE))?;
    save_agent(&run.best_agent, &spec.name, out.join(BEST_AGENT_FILE))?;
    if let Some(idm) = &run.idm {
        save_idm(idm, out.join(IDM_FILE))?;
        write_text(out.join(IDM_TRACE_FILE), &idm_trace_csv(&run.idm_trace))?;
    }
    let last = run.curve.last().ok_or(Error::Empty("learning curve"))?;
    Ok(summary_line(&[
        ("env", spec.name.clone()),
        ("seed", seed.to_string()),
        ("guide", guided.guide.to_string()),
        ("agent", guided.agent.name().into()),
        ("total_steps", guided.total_steps.to_string()),
        ("final_return", last.mean_return.to_string()),
        ("offline_actions", run.offline_actions.to_string()),
        ("curve", out.join(CURVE_FILE).display().to_string()),
    ]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Metric {
    Return,
    DiffError,
    Both,
}

impl Metric {
    fn parse(s: &str) -> CliResult<Self> {
        match s {
            "return" => Ok(Metric::Return),
            "diff_error" => Ok(Metric::DiffError),
            "both" => Ok(Metric::Both),
            other => Err(usage(format!("unknown metric '{other}' (expected return, diff_error or both)"))),
        }
    }

    fn returns(self) -> bool {
        self != Metric::DiffError
    }

    fn diffs(self) -> bool {
        self != Metric::Return
    }
}

fn eval(config: &RunConfig, out: &Path) -> CliResult<String> {
    let spec = EnvSpec::from_name(config.str("env").map_err(usage)?).map_err(usage)?;
    let metric = Metric::parse(config.str("metric").map_err(usage)?)?;
    let episodes: usize = config.parse("episodes").map_err(usage)?;
    let seed: u64 = config.parse("seed").map_err(usage)?;
    let model_path = required(config, "model")?.to_string();
    let idm_path = required(config, "expert_idm")?.to_string();
    let scores_path = config.opt_str("scores").map_err(usage)?;
    if metric.returns() && scores_path.is_none() {
        return Err(usage("`scores` must be set to report returns (see train-expert)"));
    }
    let model = load_model(&model_path)?;
    let idm = load_expert_idm(&idm_path)?;
    let reference = match scores_path {
        Some(p) => ScoresFile::load(p)?.get(&spec.name)?,
        None => ReferenceScores::new(0.0, 1.0)?,
    };
    let group = config.opt_str("group").map_err(usage)?.unwrap_or(model.kind.name()).to_string();
    let report = rollout_state_policy(&spec, &model, &idm, &reference, episodes, &mut Rng::new(seed))?;

    let mut csv = String::from("episode");
    if metric.returns() {
        csv.push_str(",raw_return,normalised_return");
    }
    let diffs = metric.diffs() && !report.diff_errors.is_empty();
    if diffs {
        csv.push_str(",diff_error");
    }
    csv.push('\n');
    for i in 0..episodes {
        let _ = write!(csv, "{i}");
        if metric.returns() {
            let _ = write!(csv, ",{},{}", report.raw_returns[i], report.normalised_returns[i]);
        }
        if diffs {
            let _ = write!(csv, ",{}", report.diff_errors[i]);
        }
        csv.push('\n');
    }
    write_text(out.join(EPISODES_FILE), &csv)?;

    let mut metrics = vec![("group", group.clone()), ("seed", seed.to_string())];
    if metric.returns() {
        metrics.push(("normalised_return", report.mean_normalised().to_string()));
        metrics.push(("raw_return", mean(&report.raw_returns).to_string()));
    }
    if diffs {
        metrics.push(("diff_error", report.mean_diff_error().unwrap_or(f64::NAN).to_string()));
    }
    let line = summary_line(&metrics);
    write_text(out.join(METRICS_FILE), &format!("{line}\n"))?;
    let rows = aggregate(&metric_map(&[parse_metrics(&line)?]))?;
    write_text(out.join(SUMMARY_FILE), &summary_csv(&rows))?;
    Ok(line)
}

/// Parse one `key=value ...` metrics line.
fn parse_metrics(line: &str) -> Result<BTreeMap<String, String>> {
    line.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("malformed metrics entry '{kv}'")))
        })
        .collect()
}

fn metric_map(rows: &[BTreeMap<String, String>]) -> BTreeMap<(String, String), Vec<f64>> {
    let mut map: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for row in rows {
        let group = row.get("group").cloned().unwrap_or_default();
        for (k, v) in row {
            if k == "group" || k == "seed" {
                continue;
            }
            if let Ok(x) = v.parse::<f64>() {
                map.entry((group.clone(), k.clone())).or_default().push(x);
            }
        }
    }
    map
}

fn theory_check(config: &RunConfig, out: &Path) -> CliResult<String> {
    let mdp_config = IncrementMdpConfig {
        dims: config.parse("dims").map_err(usage)?,
        half_width: config.parse("half_width").map_err(usage)?,
        grid_step: config.parse("grid_step").map_err(usage)?,
        mean_low: config.parse("mean_low").map_err(usage)?,
        mean_high: config.parse("mean_high").map_err(usage)?,
        lattice_points: config.parse("lattice_points").map_err(usage)?,
        random_actions: config.parse("random_actions").map_err(usage)?,
        sigma: config.parse("sigma").map_err(usage)?,
        gamma: config.parse("gamma").map_err(usage)?,
        ..IncrementMdpConfig::default()
    };
    mdp_config.validate().map_err(usage)?;
    let k_list: Vec<usize> = config.list("k_list").map_err(usage)?;
    let tol: f64 = config.parse("tolerance").map_err(usage)?;
    let seed: u64 = config.parse("seed").map_err(usage)?;
    let mdp = IncrementMdp::build(&mdp_config, &mut Rng::new(seed))?;
    let report = check_bound(&mdp, &k_list, tol).map_err(|e| match e {
        Error::InvalidArgument(_) => usage(e),
        other => CliError::Runtime(other),
    })?;
    write_text(out.join(BOUND_FILE), &report.csv())?;
    for row in &report.rows {
        println!(
            "command=theory-check k={} gap={} lemma2_bound={} eps_kl={} eps_kl_theorem_bound={}",
            row.k, row.gap, row.lemma2_bound, row.eps_kl, row.eps_kl_theorem_bound
        );
    }
    let line = summary_line(&[
        ("dims", mdp_config.dims.to_string()),
        ("gamma", mdp_config.gamma.to_string()),
        ("delta_r", report.delta_r.to_string()),
        ("slope_estimate", report.slope_estimate.to_string()),
        ("holds", report.holds().to_string()),
        ("path", out.join(BOUND_FILE).display().to_string()),
    ]);
    report.ensure_holds()?;
    Ok(line)
}

/// Combine per-seed outputs of a `--seeds` run into `<out>/summary.csv`.
pub(super) fn aggregate_seeds(command: &str, out: &Path, seeds: &[u64], force: bool) -> CliResult<()> {
    let rows = match command {
        "eval" => {
            let mut parsed = Vec::new();
            for &s in seeds {
                let p = super::seed_dir(out, s).join(METRICS_FILE);
                let text = fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
                parsed.push(parse_metrics(text.trim())?);
            }
            metric_map(&parsed)
        }
        "guide" => {
            let mut map: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
            for &s in seeds {
                let dir = super::seed_dir(out, s);
                let p = dir.join(CURVE_FILE);
                let text = fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
                let returns: Vec<f64> = text
                    .lines()
                    .skip(1)
                    .map(|l| l.split(',').nth(1).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format(format!("bad curve row '{l}'"))))
                    .collect::<Result<_>>()?;
                let last = *returns.last().ok_or(Error::Empty("learning curve"))?;
                let group = if dir.join(IDM_FILE).exists() { "guided" } else { "unguided" };
                map.entry((group.into(), "final_return".into())).or_default().push(last);
                map.entry((group.into(), "mean_curve_return".into())).or_default().push(mean(&returns));
            }
            map
        }
        _ => {
            println!("command={command} seeds={} status=ok", join_seeds(seeds));
            return Ok(());
        }
    };
    let summary = aggregate(&rows)?;
    let path = out.join(SUMMARY_FILE);
    if path.exists() && !force {
        return Err(usage(format!("{} already exists (use --force to overwrite)", path.display())));
    }
    write_text(path, &summary_csv(&summary))?;
    eprint!("{}", summary_table(&summary));
    for r in &summary {
        println!(
            "command={command} seeds={} group={} metric={} mean={} se={} n_seeds={}",
            join_seeds(seeds),
            r.group,
            r.metric,
            r.mean,
            r.se,
            r.n_seeds
        );
    }
    Ok(())
}

fn join_seeds(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}
