use crate::critic::{DecomposedQ, TdLoss};
use crate::discretise::BinMode;
use crate::env::EnvSpec;
use crate::error::{ensure_dims, Error, Result};
use crate::nn::{Adam, AdamConfig, Matrix};
use crate::rng::Rng;

use super::replay::ReplayBuffer;

#[derive(Debug, Clone, PartialEq)]
pub struct DecqnConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub gamma: f64,
    pub tau: f64,
    pub ensemble: usize,
    pub n_step: usize,
    pub mode: BinMode,
    pub epsilon_start: f64,
    pub epsilon_min: f64,
    pub epsilon_decay: f64,
    pub batch_size: usize,
    pub loss: TdLoss,
}

impl Default for DecqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            learning_rate: 5e-4,
            gamma: 0.99,
            tau: 1e-3,
            ensemble: 5,
            n_step: 3,
            mode: BinMode::Three,
            epsilon_start: 1.0,
            epsilon_min: 0.05,
            epsilon_decay: 0.999,
            batch_size: 256,
            loss: TdLoss::Huber,
        }
    }
}

/// Decomposed critic over a per-dimension discretised action space with
/// ε-greedy exploration.
#[derive(Debug, Clone)]
pub struct DecqnOnlineAgent {
    pub critic: DecomposedQ,
    opts: Vec<Adam>,
    pub config: DecqnConfig,
    low: Vec<f64>,
    high: Vec<f64>,
}

impl DecqnOnlineAgent {
    pub fn new(spec: &EnvSpec, config: DecqnConfig, rng: &mut Rng) -> Self {
        let critic = DecomposedQ::new(
            spec.state_dim,
            spec.action_dim,
            config.mode,
            &config.hidden,
            config.ensemble,
            rng,
        );
        Self::from_critic(critic, spec, config)
    }

    pub fn from_critic(critic: DecomposedQ, spec: &EnvSpec, config: DecqnConfig) -> Self {
        let opts = critic
            .members()
            .iter()
            .map(|m| Adam::new(m, AdamConfig::with_lr(config.learning_rate)))
            .collect();
        Self {
            critic,
            opts,
            config,
            low: spec.action_low.clone(),
            high: spec.action_high.clone(),
        }
    }

    /// `max(ε_min, ε_start · decay^step)`.
    pub fn epsilon(&self, env_step: u64) -> f64 {
        let c = &self.config;
        (c.epsilon_start * c.epsilon_decay.powf(env_step as f64)).max(c.epsilon_min)
    }

    /// Continuous action of per-dimension bin digits.
    pub fn digits_to_action(&self, digits: &[usize]) -> Vec<f64> {
        digits
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let centre = 0.5 * (self.low[i] + self.high[i]);
                centre + 0.5 * (self.high[i] - self.low[i]) * f64::from(self.config.mode.value(*d))
            })
            .collect()
    }

    /// Nearest bin digit per dimension of a continuous action.
    pub fn action_to_digits(&self, action: &[f64]) -> Result<Vec<usize>> {
        ensure_dims("DecQN action", self.low.len(), action.len())?;
        let bins = self.config.mode.bins();
        Ok(action
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let u = (2.0 * (a - self.low[i]) / (self.high[i] - self.low[i]) - 1.0).clamp(-1.0, 1.0);
                (0..bins)
                    .min_by(|x, y| {
                        let dx = (f64::from(self.config.mode.value(*x)) - u).abs();
                        let dy = (f64::from(self.config.mode.value(*y)) - u).abs();
                        dx.total_cmp(&dy)
                    })
                    .expect("at least two bins")
            })
            .collect())
    }

    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        let code = self.critic.greedy_code(state)?;
        Ok(self.digits_to_action(&code.digits()))
    }

    pub fn explore(&self, state: &[f64], env_step: u64, rng: &mut Rng) -> Result<Vec<f64>> {
        if rng.uniform() < self.epsilon(env_step) {
            let bins = self.config.mode.bins();
            let digits: Vec<usize> = (0..self.low.len()).map(|_| rng.index(bins)).collect();
            return Ok(self.digits_to_action(&digits));
        }
        self.act(state)
    }

    pub fn train_step(&mut self, buffer: &ReplayBuffer, rng: &mut Rng) -> Result<Option<f64>> {
        let c = &self.config;
        if buffer.len() < c.batch_size {
            return Ok(None);
        }
        let batch = buffer.sample_n_step(c.batch_size, c.n_step, c.gamma, rng)?;
        let targets =
            self.critic
                .greedy_td_targets(&batch.next_states, &batch.rewards, &batch.not_done, &batch.discount)?;
        let codes = (0..batch.actions.rows())
            .map(|r| self.action_to_digits(batch.actions.row(r)))
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        for k in 0..self.critic.ensemble_size() {
            let (loss, grads) =
                self.critic
                    .member_loss_and_grad(k, &batch.states, &codes, &targets, 0.0, self.config.loss)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { step: buffer.len() });
            }
            self.opts[k].step(self.critic.member_mut(k), &grads)?;
            total += loss.total;
        }
        self.critic.soft_update(self.config.tau);
        Ok(Some(total / self.critic.ensemble_size() as f64))
    }

    pub fn act_batch(&self, states: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(states.rows(), self.low.len());
        for r in 0..states.rows() {
            let a = self.act(states.row(r))?;
            out.row_mut(r).copy_from_slice(&a);
        }
        Ok(out)
    }
}
