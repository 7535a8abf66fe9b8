use std::fmt::Write as _;

use crate::discretise::discretise;
use crate::env::{episode_return, Actor, Dataset, EnvSpec, Policy};
use crate::error::{ensure_dims, Error, Result};
use crate::nn::{Adam, AdamConfig, Matrix};
use crate::offline::{ModelKind, PretrainedModel};
use crate::rng::Rng;

use super::agent::{AgentKind, GreedyPolicy, OnlineAgent};
use super::decqn::DecqnConfig;
use super::idm::{IdmInput, IdmNet};
use super::replay::ReplayBuffer;
use super::td3::Td3Config;

/// Piecewise-constant switching probability
/// `β(t) = clamp(β_max - decrement · floor(t / interval), β_min, β_max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSchedule {
    pub beta_max: f64,
    pub decrement: f64,
    pub interval: u64,
    pub beta_min: f64,
}

impl Default for GuidanceSchedule {
    fn default() -> Self {
        Self {
            beta_max: 0.5,
            decrement: 0.1,
            interval: 100_000,
            beta_min: 0.0,
        }
    }
}

impl GuidanceSchedule {
    /// Default schedule with the interval shrunk to `total_steps / 10` for
    /// budgets under one million steps.
    pub fn scaled(total_steps: u64) -> Self {
        let interval = if total_steps < 1_000_000 {
            (total_steps / 10).max(1)
        } else {
            100_000
        };
        Self {
            interval,
            ..Self::default()
        }
    }

    pub fn fixed(beta: f64) -> Self {
        Self {
            beta_max: beta,
            decrement: 0.0,
            interval: 1,
            beta_min: beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.beta_min)
            && (0.0..=1.0).contains(&self.beta_max)
            && self.beta_min <= self.beta_max
            && self.decrement >= 0.0
            && self.interval > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid guidance schedule {self:?}")))
        }
    }

    pub fn beta(&self, env_step: u64) -> f64 {
        let drops = (env_step / self.interval) as f64;
        (self.beta_max - self.decrement * drops).clamp(self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedConfig {
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub schedule: GuidanceSchedule,
    /// `false` runs the plain online agent (no IDM, no switching).
    pub guide: bool,
    /// Environment steps before the offline branch may fire.
    pub idm_warmup: u64,
    /// Online transitions required before IDM updates start.
    pub idm_min_fill: usize,
    pub idm_batch: usize,
    pub idm_lr: f64,
    pub idm_hidden: Vec<usize>,
    pub replay_capacity: usize,
    pub agent: AgentKind,
    pub td3: Td3Config,
    pub decqn: DecqnConfig,
}

impl Default for GuidedConfig {
    fn default() -> Self {
        Self {
            total_steps: 1_000_000,
            eval_interval: 10_000,
            eval_episodes: 10,
            schedule: GuidanceSchedule::default(),
            guide: true,
            idm_warmup: 1000,
            idm_min_fill: 256,
            idm_batch: 512,
            idm_lr: 1e-3,
            idm_hidden: vec![256, 256, 256],
            replay_capacity: 1_000_000,
            agent: AgentKind::Td3,
            td3: Td3Config::default(),
            decqn: DecqnConfig::default(),
        }
    }
}

impl GuidedConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.total_steps == 0 || self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::InvalidArgument(
                "total steps, evaluation interval and episodes must be >= 1".into(),
            ));
        }
        if self.idm_batch == 0 || self.replay_capacity == 0 || self.idm_min_fill == 0 {
            return Err(Error::InvalidArgument("IDM batch, min fill and replay capacity must be >= 1".into()));
        }
        if !(self.idm_lr > 0.0) {
            return Err(Error::InvalidArgument("IDM learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Switching probability in effect at `env_step`.
    pub fn beta_at(&self, env_step: u64) -> f64 {
        if !self.guide || env_step < self.idm_warmup {
            0.0
        } else {
            self.schedule.beta(env_step)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Offline,
    Online,
}

/// `I(s, argmax_Δs Q(s, Δs))` with probability `beta`, otherwise the online
/// agent's exploratory action. `ζ` is always drawn from `switch_rng`, so the
/// agent's stream is untouched by the switch itself.
#[allow(clippy::too_many_arguments)]
pub fn select_action(
    agent: &OnlineAgent,
    model: &PretrainedModel,
    idm: &IdmNet,
    spec: &EnvSpec,
    state: &[f64],
    beta: f64,
    env_step: u64,
    switch_rng: &mut Rng,
    agent_rng: &mut Rng,
) -> Result<(Vec<f64>, Branch)> {
    let zeta = switch_rng.uniform();
    if zeta < beta {
        let code = model.greedy_code(state)?;
        Ok((spec.clip_action(&idm.predict(state, &code)?), Branch::Offline))
    } else {
        Ok((spec.clip_action(&agent.explore(state, env_step, agent_rng)?), Branch::Online))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub env_step: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub beta: f64,
    /// Mean two-term IDM loss since the previous row; NaN without updates.
    pub idm_loss: f64,
}

/// IDM loss terms averaged over an evaluation interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdmTraceRow {
    pub env_step: u64,
    pub online: f64,
    pub offline: f64,
    pub updates: u64,
}

#[derive(Debug, Clone)]
pub struct GuidedRun {
    pub curve: Vec<CurveRow>,
    pub idm_trace: Vec<IdmTraceRow>,
    pub agent: OnlineAgent,
    /// Snapshot of the agent at its best evaluation.
    pub best_agent: OnlineAgent,
    pub idm: Option<IdmNet>,
    pub offline_actions: u64,
}

pub fn curve_csv(curve: &[CurveRow]) -> String {
    let mut out = String::from("env_step,mean_return,std_return,beta,idm_loss\n");
    for r in curve {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.env_step, r.mean_return, r.std_return, r.beta, r.idm_loss
        );
    }
    out
}

pub fn idm_trace_csv(trace: &[IdmTraceRow]) -> String {
    let mut out = String::from("env_step,online_loss,offline_loss,updates\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{},{}", r.env_step, r.online, r.offline, r.updates);
    }
    out
}

/// Undiscounted returns of `episodes` rollouts.
pub fn evaluate_policy(spec: &EnvSpec, policy: &mut dyn Policy, episodes: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    (0..episodes).map(|_| episode_return(spec, policy, rng)).collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pretrained guidance inputs: the state policy and its offline data.
struct Guide<'a> {
    model: &'a PretrainedModel,
    idm: IdmNet,
    adam: Adam,
    /// Offline `(s, Δs)` feature rows and the raw offline states.
    offline_features: Matrix,
    offline_states: Matrix,
}

impl<'a> Guide<'a> {
    fn new(
        spec: &EnvSpec,
        model: &'a PretrainedModel,
        offline: Option<&Dataset>,
        config: &GuidedConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !matches!(model.kind, ModelKind::Oso | ModelKind::DecqnN | ModelKind::BcDelta) {
            return Err(Error::InvalidArgument(format!(
                "guidance needs a code-valued state policy, got '{}'",
                model.kind.name()
            )));
        }
        model.ensure_state_dim(spec.state_dim)?;
        let idm = IdmNet::new(
            model.stats.clone(),
            spec.action_low.clone(),
            spec.action_high.clone(),
            IdmInput::Code,
            &config.idm_hidden,
            rng,
        );
        let adam = Adam::new(&idm.net, AdamConfig::with_lr(config.idm_lr));
        let m = spec.state_dim;
        let (mut features, mut states) = (Vec::new(), Vec::new());
        let mut rows = 0;
        if let Some(ds) = offline {
            ensure_dims("offline dataset state dim", m, ds.state_dim())?;
            for i in 0..ds.len() {
                let s = ds.state_f64(i);
                let code = discretise(&s, &ds.next_state_f64(i), &model.stats, &model.discretiser)?;
                features.extend(idm.features(&s, &code.as_reals())?);
                states.extend(s);
                rows += 1;
            }
        }
        Ok(Self {
            model,
            idm,
            adam,
            offline_features: Matrix::from_vec(rows, 2 * m, features)?,
            offline_states: Matrix::from_vec(rows, m, states)?,
        })
    }

    fn update(
        &mut self,
        buffer: &ReplayBuffer,
        agent: &OnlineAgent,
        batch: usize,
        rng: &mut Rng,
    ) -> Result<(f64, f64)> {
        let m = buffer.state(0).len();
        let idx = buffer.sample_indices(batch, rng)?;
        let mut x = Matrix::zeros(batch, 2 * m);
        let mut a = Matrix::zeros(batch, self.idm.action_dim());
        for (r, &i) in idx.iter().enumerate() {
            let code = discretise(buffer.state(i), buffer.next_state(i), &self.model.stats, &self.model.discretiser)?;
            x.row_mut(r).copy_from_slice(&self.idm.features(buffer.state(i), &code.as_reals())?);
            a.row_mut(r).copy_from_slice(buffer.action(i));
        }
        let offline = if self.offline_features.rows() > 0 {
            let n = self.offline_features.rows();
            let off_idx: Vec<usize> = (0..batch).map(|_| rng.index(n)).collect();
            let mut fx = Matrix::zeros(batch, 2 * m);
            let mut fs = Matrix::zeros(batch, m);
            for (r, &i) in off_idx.iter().enumerate() {
                fx.row_mut(r).copy_from_slice(self.offline_features.row(i));
                fs.row_mut(r).copy_from_slice(self.offline_states.row(i));
            }
            let relabelled = agent.relabel(&fs)?;
            Some((fx, relabelled))
        } else {
            None
        };
        let loss = self.idm.update(
            &mut self.adam,
            (&x, &a),
            offline.as_ref().map(|(x, a)| (x, a)),
        )?;
        Ok((loss.online, loss.offline))
    }
}

/// Online training loop. With `config.guide` the pretrained state policy is
/// mixed in through the IDM; otherwise this is the plain online agent.
pub fn guided_train(
    spec: &EnvSpec,
    model: Option<&PretrainedModel>,
    offline: Option<&Dataset>,
    config: &GuidedConfig,
    rng: &mut Rng,
) -> Result<GuidedRun> {
    config.validate()?;
    spec.validate()?;
    let mut agent_rng = rng.fork("agent");
    let mut env_rng = rng.fork("env");
    let mut eval_rng = rng.fork("eval");
    let mut switch_rng = rng.fork("switch");
    let mut idm_rng = rng.fork("idm");
    let mut agent = OnlineAgent::new(config.agent, spec, &config.td3, &config.decqn, &mut agent_rng);
    let mut guide = match (config.guide, model) {
        (true, Some(model)) => Some(Guide::new(spec, model, offline, config, &mut idm_rng)?),
        (true, None) => {
            return Err(Error::InvalidArgument("guided training needs a pretrained model".into()))
        }
        (false, _) => None,
    };
    let mut buffer = ReplayBuffer::new(spec.state_dim, spec.action_dim, config.replay_capacity);
    let mut curve = Vec::new();
    let mut idm_trace = Vec::new();
    let mut best: Option<(f64, OnlineAgent)> = None;
    let (mut on_sum, mut off_sum, mut idm_updates) = (0.0, 0.0, 0u64);
    let mut offline_actions = 0;
    let mut state = spec.reset(&mut env_rng);
    let mut t = 0;
    for env_step in 0..config.total_steps {
        let beta = config.beta_at(env_step);
        let action = match &guide {
            Some(g) => {
                let (a, branch) = select_action(
                    &agent,
                    g.model,
                    &g.idm,
                    spec,
                    &state,
                    beta,
                    env_step,
                    &mut switch_rng,
                    &mut agent_rng,
                )?;
                offline_actions += u64::from(branch == Branch::Offline);
                a
            }
            None => spec.clip_action(&agent.explore(&state, env_step, &mut agent_rng)?),
        };
        let out = spec.step(&state, &action)?;
        t += 1;
        let episode_end = out.terminal || t == spec.horizon;
        buffer.push(&state, &action, out.reward, &out.next_state, out.terminal, episode_end)?;
        agent.train_step(&buffer, &mut agent_rng)?;
        if let Some(g) = guide.as_mut() {
            if buffer.len() >= config.idm_min_fill {
                let (on, off) = g.update(&buffer, &agent, config.idm_batch, &mut idm_rng)?;
                on_sum += on;
                off_sum += off;
                idm_updates += 1;
            }
        }
        state = out.next_state;
        if episode_end {
            state = spec.reset(&mut env_rng);
            t = 0;
        }
        let done = env_step + 1;
        if done % config.eval_interval == 0 || done == config.total_steps {
            let returns = evaluate_policy(spec, &mut GreedyPolicy(&agent), config.eval_episodes, &mut eval_rng)?;
            let (mean, std) = mean_std(&returns);
            let n = idm_updates.max(1) as f64;
            let idm_loss = if idm_updates > 0 { (on_sum + off_sum) / n } else { f64::NAN };
            curve.push(CurveRow {
                env_step: done,
                mean_return: mean,
                std_return: std,
                beta: config.beta_at(done.saturating_sub(1)),
                idm_loss,
            });
            if idm_updates > 0 {
                idm_trace.push(IdmTraceRow {
                    env_step: done,
                    online: on_sum / n,
                    offline: off_sum / n,
                    updates: idm_updates,
                });
            }
            (on_sum, off_sum, idm_updates) = (0.0, 0.0, 0);
            if best.as_ref().is_none_or(|(b, _)| mean > *b) {
                best = Some((mean, agent.clone()));
            }
        }
    }
    let best_agent = best.map(|(_, a)| a).unwrap_or_else(|| agent.clone());
    Ok(GuidedRun {
        curve,
        idm_trace,
        agent,
        best_agent,
        idm: guide.map(|g| g.idm),
        offline_actions,
    })
}

/// Train an unguided TD3 agent and return the actor of its best evaluation.
pub fn train_expert(spec: &EnvSpec, config: &GuidedConfig, rng: &mut Rng) -> Result<(Actor, Vec<CurveRow>)> {
    let config = GuidedConfig {
        guide: false,
        agent: AgentKind::Td3,
        ..config.clone()
    };
    let run = guided_train(spec, None, None, &config, rng)?;
    match run.best_agent {
        OnlineAgent::Td3(agent) => Ok((agent.actor, run.curve)),
        OnlineAgent::Decqn(_) => unreachable!("expert training always uses TD3"),
    }
}
