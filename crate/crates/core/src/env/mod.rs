//! Native continuous-control environments, behaviour policies of graded
//! quality, offline dataset generation, and the binary dataset format.

mod dataset;
mod io;
mod policy;

pub use dataset::{generate_dataset, strip_actions, Dataset, Quality, Transition};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use policy::{make_behaviour_policy, Actor, BehaviourPolicy, Policy, RandomPolicy};

use std::f64::consts::PI;

use crate::error::{ensure_dims, ensure_finite, Error, Result};
use crate::rng::Rng;

pub const POINT_MASS_DT: f64 = 0.1;
pub const POINT_MASS_ACCEL: f64 = 1.0;
pub const POINT_MASS_FRICTION: f64 = 0.5;
pub const POINT_MASS_ARENA: f64 = 4.0;
pub const POINT_MASS_ACTION_COST: f64 = 0.01;

pub const PENDULUM_DT: f64 = 0.05;
pub const PENDULUM_GRAVITY: f64 = 10.0;
pub const PENDULUM_MASS: f64 = 1.0;
pub const PENDULUM_LENGTH: f64 = 1.0;
pub const PENDULUM_MAX_SPEED: f64 = 8.0;
pub const PENDULUM_MAX_TORQUE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    /// Planar point mass driven by bounded accelerations toward the origin.
    PointMass,
    /// Torque-limited swing-up pendulum observed as `(cos θ, sin θ, θ̇)`.
    Pendulum,
    /// `k` independent point masses stacked into one state.
    MultiPoint(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

impl EnvSpec {
    pub fn point_mass() -> Self {
        Self {
            name: "pointmass".into(),
            kind: EnvKind::PointMass,
            state_dim: 4,
            action_dim: 2,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            horizon: 100,
        }
    }

    pub fn pendulum() -> Self {
        Self {
            name: "pendulum".into(),
            kind: EnvKind::Pendulum,
            state_dim: 3,
            action_dim: 1,
            action_low: vec![-PENDULUM_MAX_TORQUE],
            action_high: vec![PENDULUM_MAX_TORQUE],
            horizon: 200,
        }
    }

    pub fn multi_point(k: usize) -> Self {
        Self {
            name: format!("multipoint{k}"),
            kind: EnvKind::MultiPoint(k),
            state_dim: 4 * k,
            action_dim: 2 * k,
            action_low: vec![-1.0; 2 * k],
            action_high: vec![1.0; 2 * k],
            horizon: 100,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "pointmass" => Ok(Self::point_mass()),
            "pendulum" => Ok(Self::pendulum()),
            "multipoint2" => Ok(Self::multi_point(2)),
            "multipoint4" => Ok(Self::multi_point(4)),
            other => Err(Error::InvalidArgument(format!(
                "unknown environment '{other}' (expected pointmass, pendulum, multipoint2, multipoint4)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::InvalidArgument("state and action dims must be >= 1".into()));
        }
        ensure_dims("action_low", self.action_dim, self.action_low.len())?;
        ensure_dims("action_high", self.action_dim, self.action_high.len())?;
        for (lo, hi) in self.action_low.iter().zip(&self.action_high) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!("bad action bounds [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }

    pub fn action_centre(&self) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }

    pub fn action_range(&self) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(lo, hi)| hi - lo)
            .collect()
    }

    /// Initial state distribution.
    pub fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        match self.kind {
            EnvKind::PointMass => point_mass_reset(rng),
            EnvKind::MultiPoint(k) => (0..k).flat_map(|_| point_mass_reset(rng)).collect(),
            EnvKind::Pendulum => {
                let theta = rng.uniform_in(-PI, PI);
                let speed = rng.uniform_in(-1.0, 1.0);
                vec![theta.cos(), theta.sin(), speed]
            }
        }
    }

    /// One step of the dynamics. Actions outside the bounds are clipped.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<StepOutcome> {
        ensure_dims("state", self.state_dim, state.len())?;
        ensure_dims("action", self.action_dim, action.len())?;
        ensure_finite("state", state)?;
        ensure_finite("action", action)?;
        let action = self.clip_action(action);
        let outcome = match self.kind {
            EnvKind::PointMass => {
                let (next, reward) = point_mass_step(state, &action);
                StepOutcome {
                    next_state: next.to_vec(),
                    reward,
                    terminal: false,
                }
            }
            EnvKind::MultiPoint(k) => {
                let mut next_state = Vec::with_capacity(4 * k);
                let mut reward = 0.0;
                for i in 0..k {
                    let (next, r) =
                        point_mass_step(&state[4 * i..4 * i + 4], &action[2 * i..2 * i + 2]);
                    next_state.extend_from_slice(&next);
                    reward += r;
                }
                StepOutcome {
                    next_state,
                    reward: reward / k as f64,
                    terminal: false,
                }
            }
            EnvKind::Pendulum => pendulum_step(state, action[0]),
        };
        Ok(outcome)
    }
}

fn point_mass_reset(rng: &mut Rng) -> Vec<f64> {
    vec![rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0), 0.0, 0.0]
}

/// Semi-implicit Euler: velocity first, then position with the new velocity.
/// Walls at `±POINT_MASS_ARENA` stop the mass along the blocked axis.
fn point_mass_step(state: &[f64], action: &[f64]) -> ([f64; 4], f64) {
    let mut next = [0.0; 4];
    for axis in 0..2 {
        let pos = state[axis];
        let vel = state[2 + axis];
        let mut v = vel + POINT_MASS_DT * (POINT_MASS_ACCEL * action[axis] - POINT_MASS_FRICTION * vel);
        let mut p = pos + POINT_MASS_DT * v;
        if p.abs() > POINT_MASS_ARENA {
            p = p.clamp(-POINT_MASS_ARENA, POINT_MASS_ARENA);
            v = 0.0;
        }
        next[axis] = p;
        next[2 + axis] = v;
    }
    let distance = next[0].hypot(next[1]);
    let effort = action[0] * action[0] + action[1] * action[1];
    (next, -distance - POINT_MASS_ACTION_COST * effort)
}

fn angle_normalize(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

fn pendulum_step(state: &[f64], torque: f64) -> StepOutcome {
    let theta = state[1].atan2(state[0]);
    let speed = state[2];
    let cost = angle_normalize(theta).powi(2) + 0.1 * speed * speed + 0.001 * torque * torque;
    let accel = 3.0 * PENDULUM_GRAVITY / (2.0 * PENDULUM_LENGTH) * theta.sin()
        + 3.0 / (PENDULUM_MASS * PENDULUM_LENGTH * PENDULUM_LENGTH) * torque;
    let new_speed = (speed + accel * PENDULUM_DT).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
    let new_theta = theta + new_speed * PENDULUM_DT;
    StepOutcome {
        next_state: vec![new_theta.cos(), new_theta.sin(), new_speed],
        reward: -cost,
        terminal: false,
    }
}

/// Roll out one episode, returning the undiscounted return.
pub fn episode_return(spec: &EnvSpec, policy: &mut dyn Policy, rng: &mut Rng) -> Result<f64> {
    let mut state = spec.reset(rng);
    policy.begin_episode(rng);
    let mut total = 0.0;
    for _ in 0..spec.horizon {
        let action = policy.act(&state, rng)?;
        let out = spec.step(&state, &action)?;
        total += out.reward;
        state = out.next_state;
        if out.terminal {
            break;
        }
    }
    Ok(total)
}
