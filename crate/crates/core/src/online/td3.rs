use crate::env::{Actor, EnvSpec};
use crate::error::{Error, Result};
use crate::nn::{mse, Activation, Adam, AdamConfig, Gradients, Matrix, Mlp};
use crate::rng::Rng;

use super::replay::{Batch, ReplayBuffer};

#[derive(Debug, Clone, PartialEq)]
pub struct Td3Config {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Target-policy smoothing noise, as a fraction of the action half-range.
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub policy_delay: u64,
    /// Gaussian exploration noise, as a fraction of the action half-range.
    pub exploration_noise: f64,
    pub batch_size: usize,
    /// Uniform-random actions for this many environment steps.
    pub start_steps: u64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            actor_lr: 5e-4,
            critic_lr: 5e-4,
            gamma: 0.99,
            tau: 1e-3,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_delay: 2,
            exploration_noise: 0.1,
            batch_size: 256,
            start_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Td3Losses {
    pub critic: f64,
    pub actor: Option<f64>,
}

/// Twin-critic deterministic actor-critic.
#[derive(Debug, Clone)]
pub struct Td3Agent {
    pub actor: Actor,
    pub actor_target: Actor,
    pub critics: Vec<Mlp>,
    pub critic_targets: Vec<Mlp>,
    actor_opt: Adam,
    critic_opts: Vec<Adam>,
    pub config: Td3Config,
    updates: u64,
}

impl Td3Agent {
    pub fn new(spec: &EnvSpec, config: Td3Config, rng: &mut Rng) -> Self {
        let actor = Actor::new(spec, &config.hidden, rng);
        let mut sizes = vec![spec.state_dim + spec.action_dim];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(1);
        let critics: Vec<Mlp> = (0..2)
            .map(|_| Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng))
            .collect();
        Self::from_parts(actor, critics, config)
    }

    pub fn from_parts(actor: Actor, critics: Vec<Mlp>, config: Td3Config) -> Self {
        let actor_opt = Adam::new(&actor.net, AdamConfig::with_lr(config.actor_lr));
        let critic_opts = critics
            .iter()
            .map(|c| Adam::new(c, AdamConfig::with_lr(config.critic_lr)))
            .collect();
        Self {
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            actor,
            critics,
            actor_opt,
            critic_opts,
            config,
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn half(&self) -> Vec<f64> {
        self.actor.half_range()
    }

    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.actor.action(state)
    }

    /// Deterministic action plus Gaussian noise, or uniform during the
    /// start-up phase.
    pub fn explore(&self, state: &[f64], env_step: u64, rng: &mut Rng) -> Result<Vec<f64>> {
        if env_step < self.config.start_steps {
            return Ok(self
                .actor
                .low
                .iter()
                .zip(&self.actor.high)
                .map(|(l, h)| rng.uniform_in(*l, *h))
                .collect());
        }
        let base = self.act(state)?;
        let half = self.half();
        Ok(base
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let noisy = a + self.config.exploration_noise * half[i] * rng.normal();
                noisy.clamp(self.actor.low[i], self.actor.high[i])
            })
            .collect())
    }

    /// Clipped double-Q targets with target-policy smoothing.
    pub fn targets(&self, batch: &Batch, rng: &mut Rng) -> Result<Vec<f64>> {
        let mut next_actions = self.actor_target.action_batch(&batch.next_states)?;
        let half = self.half();
        let c = self.config.noise_clip;
        for r in 0..next_actions.rows() {
            for (i, a) in next_actions.row_mut(r).iter_mut().enumerate() {
                let noise = (self.config.policy_noise * rng.normal()).clamp(-c, c) * half[i];
                *a = (*a + noise).clamp(self.actor.low[i], self.actor.high[i]);
            }
        }
        let x = batch.next_states.hconcat(&next_actions)?;
        let q1 = self.critic_targets[0].forward_batch(&x)?;
        let q2 = self.critic_targets[1].forward_batch(&x)?;
        Ok((0..x.rows())
            .map(|r| {
                let v = q1.get(r, 0).min(q2.get(r, 0));
                batch.rewards[r] + batch.discount[r] * batch.not_done[r] * v
            })
            .collect())
    }

    /// Mean squared error of critic `k` against `targets`.
    pub fn critic_loss_and_grad(&self, k: usize, batch: &Batch, targets: &[f64]) -> Result<(f64, Gradients)> {
        critic_loss_and_grad(&self.critics[k], batch, targets)
    }

    /// `-mean Q1(s, π(s))` and its gradient for the actor parameters.
    pub fn actor_loss_and_grad(&self, states: &Matrix) -> Result<(f64, Gradients)> {
        actor_loss_and_grad(&self.actor, &self.critics[0], states)
    }

    pub fn update(&mut self, batch: &Batch, rng: &mut Rng) -> Result<Td3Losses> {
        let targets = self.targets(batch, rng)?;
        let mut critic_loss = 0.0;
        for k in 0..2 {
            let (loss, grads) = self.critic_loss_and_grad(k, batch, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: self.updates as usize });
            }
            self.critic_opts[k].step(&mut self.critics[k], &grads)?;
            critic_loss += loss;
        }
        self.updates += 1;
        let mut actor = None;
        if self.updates % self.config.policy_delay == 0 {
            let (loss, grads) = self.actor_loss_and_grad(&batch.states)?;
            self.actor_opt.step(&mut self.actor.net, &grads)?;
            actor = Some(loss);
            let tau = self.config.tau;
            self.actor_target.net.soft_update_from(&self.actor.net, tau);
            for (t, c) in self.critic_targets.iter_mut().zip(&self.critics) {
                t.soft_update_from(c, tau);
            }
        }
        Ok(Td3Losses {
            critic: critic_loss / 2.0,
            actor,
        })
    }

    /// One update from the buffer once it holds a full batch.
    pub fn train_step(&mut self, buffer: &ReplayBuffer, rng: &mut Rng) -> Result<Option<Td3Losses>> {
        if buffer.len() < self.config.batch_size {
            return Ok(None);
        }
        let batch = buffer.sample(self.config.batch_size, self.config.gamma, rng)?;
        self.update(&batch, rng).map(Some)
    }
}

pub fn critic_loss_and_grad(critic: &Mlp, batch: &Batch, targets: &[f64]) -> Result<(f64, Gradients)> {
    let x = batch.states.hconcat(&batch.actions)?;
    let trace = critic.forward_traced(&x)?;
    let y = Matrix::from_vec(targets.len(), 1, targets.to_vec())?;
    let (loss, upstream) = mse(trace.output(), &y);
    let (grads, _) = critic.backward(&trace, &upstream)?;
    Ok((loss, grads))
}

pub fn actor_loss_and_grad(actor: &Actor, critic: &Mlp, states: &Matrix) -> Result<(f64, Gradients)> {
    let n = states.rows();
    let actor_trace = actor.net.forward_traced(states)?;
    let mut actions = actor_trace.output().clone();
    for r in 0..n {
        let scaled = actor.scale(actions.row(r));
        actions.row_mut(r).copy_from_slice(&scaled);
    }
    let x = states.hconcat(&actions)?;
    let critic_trace = critic.forward_traced(&x)?;
    let q = critic_trace.output();
    let loss = -(0..n).map(|r| q.get(r, 0)).sum::<f64>() / n as f64;
    let upstream = Matrix::from_vec(n, 1, vec![-1.0 / n as f64; n])?;
    let (_, dx) = critic.backward(&critic_trace, &upstream)?;
    let m = states.cols();
    let half = actor.half_range();
    let mut da = dx.columns(m, dx.cols());
    for r in 0..n {
        da.row_mut(r).iter_mut().zip(&half).for_each(|(g, h)| *g *= h);
    }
    let (grads, _) = actor.net.backward(&actor_trace, &da)?;
    Ok((loss, grads))
}
