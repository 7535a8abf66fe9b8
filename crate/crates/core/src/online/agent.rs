use std::path::Path;

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::critic::DecomposedQ;
use crate::discretise::BinMode;
use crate::env::{Actor, EnvSpec, Policy};
use crate::error::{ensure_dims, Error, Result};
use crate::nn::Matrix;
use crate::offline::bin_mode_tag;
use crate::rng::Rng;

use super::decqn::{DecqnConfig, DecqnOnlineAgent};
use super::replay::ReplayBuffer;
use super::td3::{Td3Agent, Td3Config};

pub const AGENT_MAGIC: &[u8; 4] = b"AGNT";
pub const ACTOR_MAGIC: &[u8; 4] = b"ACTR";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Td3,
    Decqn,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Td3 => "td3",
            AgentKind::Decqn => "decqn",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "td3" => Ok(AgentKind::Td3),
            "decqn" => Ok(AgentKind::Decqn),
            other => Err(Error::InvalidArgument(format!(
                "unknown agent '{other}' (expected td3 or decqn)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum OnlineAgent {
    Td3(Td3Agent),
    Decqn(DecqnOnlineAgent),
}

impl OnlineAgent {
    pub fn new(kind: AgentKind, spec: &EnvSpec, td3: &Td3Config, decqn: &DecqnConfig, rng: &mut Rng) -> Self {
        match kind {
            AgentKind::Td3 => OnlineAgent::Td3(Td3Agent::new(spec, td3.clone(), rng)),
            AgentKind::Decqn => OnlineAgent::Decqn(DecqnOnlineAgent::new(spec, decqn.clone(), rng)),
        }
    }

    pub fn kind(&self) -> AgentKind {
        match self {
            OnlineAgent::Td3(_) => AgentKind::Td3,
            OnlineAgent::Decqn(_) => AgentKind::Decqn,
        }
    }

    /// Deterministic (evaluation) action.
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        match self {
            OnlineAgent::Td3(a) => a.act(state),
            OnlineAgent::Decqn(a) => a.act(state),
        }
    }

    /// Exploratory action used while collecting experience.
    pub fn explore(&self, state: &[f64], env_step: u64, rng: &mut Rng) -> Result<Vec<f64>> {
        match self {
            OnlineAgent::Td3(a) => a.explore(state, env_step, rng),
            OnlineAgent::Decqn(a) => a.explore(state, env_step, rng),
        }
    }

    /// Deterministic actions for a batch of states (offline relabelling).
    pub fn relabel(&self, states: &Matrix) -> Result<Matrix> {
        match self {
            OnlineAgent::Td3(a) => a.actor.action_batch(states),
            OnlineAgent::Decqn(a) => a.act_batch(states),
        }
    }

    pub fn train_step(&mut self, buffer: &ReplayBuffer, rng: &mut Rng) -> Result<()> {
        match self {
            OnlineAgent::Td3(a) => a.train_step(buffer, rng).map(|_| ()),
            OnlineAgent::Decqn(a) => a.train_step(buffer, rng).map(|_| ()),
        }
    }
}

/// Evaluation wrapper: always the deterministic action.
pub struct GreedyPolicy<'a>(pub &'a OnlineAgent);

impl Policy for GreedyPolicy<'_> {
    fn act(&mut self, state: &[f64], _rng: &mut Rng) -> Result<Vec<f64>> {
        self.0.act(state)
    }
}

/// Agent checkpoint: environment name, kind and every network (optimiser
/// moments are not kept).
pub fn write_agent(agent: &OnlineAgent, env_name: &str) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(AGENT_MAGIC);
    w.u32(FILE_VERSION);
    w.str(env_name);
    match agent {
        OnlineAgent::Td3(a) => {
            w.u8(0);
            w.mlp(&a.actor.net);
            w.mlp(&a.actor_target.net);
            a.critics.iter().chain(&a.critic_targets).for_each(|c| w.mlp(c));
        }
        OnlineAgent::Decqn(a) => {
            w.u8(1);
            w.u8(bin_mode_tag(a.critic.mode()));
            w.u32(a.critic.ensemble_size() as u32);
            a.critic.members().iter().chain(a.critic.targets()).for_each(|c| w.mlp(c));
        }
    }
    w.bytes
}

pub fn read_agent(bytes: &[u8]) -> Result<(String, OnlineAgent)> {
    let mut r = Reader::new(bytes);
    r.magic(AGENT_MAGIC, "agent")?;
    r.version(FILE_VERSION, "agent")?;
    let env_name = r.str("environment name")?;
    let spec = EnvSpec::from_name(&env_name)?;
    let agent = match r.u8("agent kind")? {
        0 => {
            let actor = Actor::from_net(r.mlp()?, &spec)?;
            let actor_target = Actor::from_net(r.mlp()?, &spec)?;
            let nets = (0..4).map(|_| r.mlp()).collect::<Result<Vec<_>>>()?;
            for n in &nets {
                ensure_dims("critic input", spec.state_dim + spec.action_dim, n.input_dim())?;
            }
            let hidden = actor.net.sizes()[1..actor.net.sizes().len() - 1].to_vec();
            let mut agent = Td3Agent::from_parts(actor, nets[..2].to_vec(), Td3Config { hidden, ..Td3Config::default() });
            agent.actor_target = actor_target;
            agent.critic_targets = nets[2..].to_vec();
            OnlineAgent::Td3(agent)
        }
        1 => {
            let mode = BinMode::from_bins(r.u8("bin mode")? as usize)?;
            let e = r.u32("ensemble")? as usize;
            if e == 0 || e > 1024 {
                return Err(Error::Format(format!("implausible ensemble size {e}")));
            }
            let nets = (0..2 * e).map(|_| r.mlp()).collect::<Result<Vec<_>>>()?;
            let critic = DecomposedQ::from_parts(nets[..e].to_vec(), nets[e..].to_vec(), spec.action_dim, mode)?;
            ensure_dims("critic input", spec.state_dim, critic.input_dim())?;
            let hidden = nets[0].sizes()[1..nets[0].sizes().len() - 1].to_vec();
            OnlineAgent::Decqn(DecqnOnlineAgent::from_critic(
                critic,
                &spec,
                DecqnConfig { hidden, mode, ensemble: e, ..DecqnConfig::default() },
            ))
        }
        other => return Err(Error::Format(format!("unknown agent tag {other}"))),
    };
    r.finish("agent networks")?;
    Ok((env_name, agent))
}

pub fn save_agent(agent: &OnlineAgent, env_name: &str, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &write_agent(agent, env_name))
}

pub fn load_agent(path: impl AsRef<Path>) -> Result<(String, OnlineAgent)> {
    read_agent(&read_file(path.as_ref())?)
}

/// Standalone deterministic actor, as used for expert behaviour policies.
pub fn write_actor(actor: &Actor, env_name: &str) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(ACTOR_MAGIC);
    w.u32(FILE_VERSION);
    w.str(env_name);
    w.mlp(&actor.net);
    w.bytes
}

pub fn read_actor(bytes: &[u8], spec: &EnvSpec) -> Result<Actor> {
    let mut r = Reader::new(bytes);
    r.magic(ACTOR_MAGIC, "actor")?;
    r.version(FILE_VERSION, "actor")?;
    let name = r.str("environment name")?;
    if name != spec.name {
        return Err(Error::InvalidArgument(format!(
            "actor was trained on '{name}', not '{}'",
            spec.name
        )));
    }
    let net = r.mlp()?;
    r.finish("actor network")?;
    Actor::from_net(net, spec)
}

pub fn save_actor(actor: &Actor, env_name: &str, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &write_actor(actor, env_name))
}

pub fn load_actor(path: impl AsRef<Path>, spec: &EnvSpec) -> Result<Actor> {
    read_actor(&read_file(path.as_ref())?, spec)
}
