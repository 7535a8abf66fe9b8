use crate::error::{ensure_dims, Error, Result};
use crate::nn::{Activation, Matrix, Mlp};
use crate::rng::Rng;

use super::{EnvSpec, Quality};

pub trait Policy {
    fn act(&mut self, state: &[f64], rng: &mut Rng) -> Result<Vec<f64>>;

    fn begin_episode(&mut self, _rng: &mut Rng) {}
}

/// Deterministic actor: `tanh` network output rescaled into the action box.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub net: Mlp,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl Actor {
    pub fn new(spec: &EnvSpec, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut sizes = vec![spec.state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(spec.action_dim);
        Self {
            net: Mlp::new(&sizes, Activation::Relu, Activation::Tanh, rng),
            low: spec.action_low.clone(),
            high: spec.action_high.clone(),
        }
    }

    pub fn from_net(net: Mlp, spec: &EnvSpec) -> Result<Self> {
        ensure_dims("actor input", spec.state_dim, net.input_dim())?;
        ensure_dims("actor output", spec.action_dim, net.output_dim())?;
        Ok(Self {
            net,
            low: spec.action_low.clone(),
            high: spec.action_high.clone(),
        })
    }

    /// Half-width of the action box per dimension; the chain-rule factor
    /// between the network's `tanh` output and the action.
    pub fn half_range(&self) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| 0.5 * (h - l))
            .collect()
    }

    pub fn scale(&self, squashed: &[f64]) -> Vec<f64> {
        squashed
            .iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(u, (l, h))| 0.5 * (l + h) + 0.5 * (h - l) * u)
            .collect()
    }

    pub fn action(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.scale(&self.net.forward(state)?))
    }

    pub fn action_batch(&self, states: &Matrix) -> Result<Matrix> {
        let mut out = self.net.forward_batch(states)?;
        for r in 0..out.rows() {
            let scaled = self.scale(out.row(r));
            out.row_mut(r).copy_from_slice(&scaled);
        }
        Ok(out)
    }
}

impl Policy for Actor {
    fn act(&mut self, state: &[f64], _rng: &mut Rng) -> Result<Vec<f64>> {
        self.action(state)
    }
}

/// Uniform over the action box.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl RandomPolicy {
    pub fn new(spec: &EnvSpec) -> Self {
        Self {
            low: spec.action_low.clone(),
            high: spec.action_high.clone(),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| rng.uniform_in(*l, *h))
            .collect()
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _state: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.sample(rng))
    }
}

pub const MEDIUM_NOISE_FRACTION: f64 = 0.3;
pub const MEDIUM_RANDOM_PROB: f64 = 0.2;

/// Data-collection policy for one dataset quality.
#[derive(Debug, Clone)]
pub struct BehaviourPolicy {
    quality: Quality,
    /// Quality used for the current episode (differs from `quality` only for
    /// mixtures).
    active: Quality,
    expert: Option<Actor>,
    random: RandomPolicy,
}

impl BehaviourPolicy {
    pub fn quality(&self) -> Quality {
        self.quality
    }

    pub fn active_quality(&self) -> Quality {
        self.active
    }

    fn expert_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.expert
            .as_ref()
            .expect("expert presence checked at construction")
            .action(state)
    }
}

impl Policy for BehaviourPolicy {
    fn begin_episode(&mut self, rng: &mut Rng) {
        if self.quality == Quality::Mixture {
            self.active = match rng.index(3) {
                0 => Quality::Random,
                1 => Quality::Medium,
                _ => Quality::Expert,
            };
        }
    }

    fn act(&mut self, state: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        match self.active {
            Quality::Random | Quality::Mixture => Ok(self.random.sample(rng)),
            Quality::Expert => self.expert_action(state),
            Quality::Medium => {
                if rng.uniform() < MEDIUM_RANDOM_PROB {
                    return Ok(self.random.sample(rng));
                }
                let base = self.expert_action(state)?;
                Ok(base
                    .iter()
                    .zip(self.random.low.iter().zip(&self.random.high))
                    .map(|(a, (l, h))| {
                        let noisy = a + MEDIUM_NOISE_FRACTION * (h - l) * rng.normal();
                        noisy.clamp(*l, *h)
                    })
                    .collect())
            }
        }
    }
}

/// Behaviour policy for `quality`. Every quality except `Random` needs a
/// trained expert actor.
pub fn make_behaviour_policy(
    spec: &EnvSpec,
    quality: Quality,
    expert: Option<Actor>,
) -> Result<BehaviourPolicy> {
    if quality != Quality::Random && expert.is_none() {
        return Err(Error::InvalidArgument(format!(
            "quality '{}' needs a trained expert policy for {}; run `train-expert --env {}` first",
            quality.name(),
            spec.name,
            spec.name
        )));
    }
    if let Some(actor) = &expert {
        ensure_dims("expert input", spec.state_dim, actor.net.input_dim())?;
        ensure_dims("expert output", spec.action_dim, actor.net.output_dim())?;
    }
    Ok(BehaviourPolicy {
        quality,
        active: if quality == Quality::Mixture {
            Quality::Random
        } else {
            quality
        },
        expert,
        random: RandomPolicy::new(spec),
    })
}
