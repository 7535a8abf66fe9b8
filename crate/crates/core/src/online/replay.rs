use crate::error::{ensure_dims, Error, Result};
use crate::nn::Matrix;
use crate::rng::Rng;

/// Ring buffer of online transitions. Every stored transition carries the
/// action that was actually executed.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    state_dim: usize,
    action_dim: usize,
    capacity: usize,
    cursor: usize,
    len: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    terminals: Vec<bool>,
    /// Last transition of an episode (terminal or time limit).
    episode_ends: Vec<bool>,
}

/// Uniformly sampled mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    /// `0` where bootstrapping is cut by a terminal state, `1` otherwise.
    pub not_done: Vec<f64>,
    /// Discount applied to the bootstrap value (`γ^k` for k-step returns).
    pub discount: Vec<f64>,
}

impl ReplayBuffer {
    pub fn new(state_dim: usize, action_dim: usize, capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            state_dim,
            action_dim,
            capacity,
            cursor: 0,
            len: 0,
            states: vec![0.0; capacity * state_dim],
            actions: vec![0.0; capacity * action_dim],
            rewards: vec![0.0; capacity],
            next_states: vec![0.0; capacity * state_dim],
            terminals: vec![false; capacity],
            episode_ends: vec![false; capacity],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(
        &mut self,
        state: &[f64],
        action: &[f64],
        reward: f64,
        next_state: &[f64],
        terminal: bool,
        episode_end: bool,
    ) -> Result<()> {
        ensure_dims("replay state", self.state_dim, state.len())?;
        ensure_dims("replay action", self.action_dim, action.len())?;
        ensure_dims("replay next state", self.state_dim, next_state.len())?;
        let i = self.cursor;
        let (m, n) = (self.state_dim, self.action_dim);
        self.states[i * m..(i + 1) * m].copy_from_slice(state);
        self.actions[i * n..(i + 1) * n].copy_from_slice(action);
        self.rewards[i] = reward;
        self.next_states[i * m..(i + 1) * m].copy_from_slice(next_state);
        self.terminals[i] = terminal;
        self.episode_ends[i] = episode_end || terminal;
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.rewards[i]
    }

    /// Slot indices of a uniform sample with replacement over the filled
    /// region.
    pub fn sample_indices(&self, batch: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::Empty("replay buffer"));
        }
        Ok((0..batch).map(|_| rng.index(self.len)).collect())
    }

    /// One-step batch.
    pub fn sample(&self, batch: usize, gamma: f64, rng: &mut Rng) -> Result<Batch> {
        self.sample_n_step(batch, 1, gamma, rng)
    }

    /// `n`-step returns, truncated at episode ends and at the write head.
    pub fn sample_n_step(&self, batch: usize, n: usize, gamma: f64, rng: &mut Rng) -> Result<Batch> {
        let idx = self.sample_indices(batch, rng)?;
        let (m, a) = (self.state_dim, self.action_dim);
        let mut out = Batch {
            states: Matrix::zeros(batch, m),
            actions: Matrix::zeros(batch, a),
            rewards: Vec::with_capacity(batch),
            next_states: Matrix::zeros(batch, m),
            not_done: Vec::with_capacity(batch),
            discount: Vec::with_capacity(batch),
        };
        for (r, &start) in idx.iter().enumerate() {
            out.states.row_mut(r).copy_from_slice(self.state(start));
            out.actions.row_mut(r).copy_from_slice(self.action(start));
            let (mut j, mut acc, mut g) = (start, 0.0, 1.0);
            for k in 0..n.max(1) {
                acc += g * self.rewards[j];
                g *= gamma;
                let next = (j + 1) % self.capacity;
                let more = k + 1 < n && !self.episode_ends[j] && next != self.cursor && next < self.len;
                if !more {
                    break;
                }
                j = next;
            }
            out.rewards.push(acc);
            out.next_states.row_mut(r).copy_from_slice(self.next_state(j));
            out.not_done.push(if self.terminals[j] { 0.0 } else { 1.0 });
            out.discount.push(g);
        }
        Ok(out)
    }
}
