use crate::error::{ensure_dims, Error, Result};
use crate::rng::Rng;

use super::{EnvSpec, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quality {
    Random,
    Medium,
    Expert,
    Mixture,
}

impl Quality {
    pub fn tag(self) -> u8 {
        match self {
            Quality::Random => 0,
            Quality::Medium => 1,
            Quality::Expert => 2,
            Quality::Mixture => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Quality::Random),
            1 => Ok(Quality::Medium),
            2 => Ok(Quality::Expert),
            3 => Ok(Quality::Mixture),
            other => Err(Error::Format(format!("unknown quality tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Random => "random",
            Quality::Medium => "medium",
            Quality::Expert => "expert",
            Quality::Mixture => "mixture",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "random" => Ok(Quality::Random),
            "medium" => Ok(Quality::Medium),
            "expert" => Ok(Quality::Expert),
            "mixture" => Ok(Quality::Mixture),
            other => Err(Error::InvalidArgument(format!(
                "unknown quality '{other}' (expected random, medium, expert, mixture)"
            ))),
        }
    }
}

/// One environment step as stored in a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f32>,
    pub action: Option<Vec<f32>>,
    pub reward: f32,
    pub next_state: Vec<f32>,
    pub terminal: bool,
}

/// Transitions in columnar storage. Values are kept at `f32` precision, the
/// precision of the on-disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f32>,
    /// Present unless the dataset is action-free.
    actions: Option<Vec<f32>>,
    rewards: Vec<f32>,
    next_states: Vec<f32>,
    terminals: Vec<bool>,
    episode_starts: Vec<u64>,
    quality: Quality,
}

impl Dataset {
    pub fn new(state_dim: usize, action_dim: usize, with_actions: bool, quality: Quality) -> Self {
        Self {
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: with_actions.then(Vec::new),
            rewards: Vec::new(),
            next_states: Vec::new(),
            terminals: Vec::new(),
            episode_starts: Vec::new(),
            quality,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        state_dim: usize,
        action_dim: usize,
        states: Vec<f32>,
        actions: Option<Vec<f32>>,
        rewards: Vec<f32>,
        next_states: Vec<f32>,
        terminals: Vec<bool>,
        episode_starts: Vec<u64>,
        quality: Quality,
    ) -> Result<Self> {
        let n = rewards.len();
        ensure_dims("dataset states", n * state_dim, states.len())?;
        ensure_dims("dataset next states", n * state_dim, next_states.len())?;
        ensure_dims("dataset terminals", n, terminals.len())?;
        if let Some(a) = &actions {
            ensure_dims("dataset actions", n * action_dim, a.len())?;
        }
        let ds = Self {
            state_dim,
            action_dim,
            states,
            actions,
            rewards,
            next_states,
            terminals,
            episode_starts,
            quality,
        };
        ds.check_episode_starts()?;
        Ok(ds)
    }

    fn check_episode_starts(&self) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        let ok = self.episode_starts.first() == Some(&0)
            && self.episode_starts.windows(2).all(|w| w[0] < w[1])
            && self
                .episode_starts
                .last()
                .is_some_and(|&s| (s as usize) < self.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Format("episode starts do not partition the transitions".into()))
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn quality(&self) -> Quality {
        self.quality
    }

    pub fn is_action_free(&self) -> bool {
        self.actions.is_none()
    }

    pub fn episode_starts(&self) -> &[u64] {
        &self.episode_starts
    }

    pub fn state(&self, i: usize) -> &[f32] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f32] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> Option<&[f32]> {
        self.actions
            .as_ref()
            .map(|a| &a[i * self.action_dim..(i + 1) * self.action_dim])
    }

    pub fn reward(&self, i: usize) -> f32 {
        self.rewards[i]
    }

    pub fn terminal(&self, i: usize) -> bool {
        self.terminals[i]
    }

    pub fn rewards(&self) -> &[f32] {
        &self.rewards
    }

    pub fn states_flat(&self) -> &[f32] {
        &self.states
    }

    pub fn next_states_flat(&self) -> &[f32] {
        &self.next_states
    }

    pub fn actions_flat(&self) -> Option<&[f32]> {
        self.actions.as_deref()
    }

    pub fn terminals(&self) -> &[bool] {
        &self.terminals
    }

    pub fn state_f64(&self, i: usize) -> Vec<f64> {
        self.state(i).iter().map(|v| f64::from(*v)).collect()
    }

    pub fn next_state_f64(&self, i: usize) -> Vec<f64> {
        self.next_state(i).iter().map(|v| f64::from(*v)).collect()
    }

    pub fn action_f64(&self, i: usize) -> Option<Vec<f64>> {
        self.action(i)
            .map(|a| a.iter().map(|v| f64::from(*v)).collect())
    }

    pub fn transition(&self, i: usize) -> Transition {
        Transition {
            state: self.state(i).to_vec(),
            action: self.action(i).map(<[f32]>::to_vec),
            reward: self.rewards[i],
            next_state: self.next_state(i).to_vec(),
            terminal: self.terminals[i],
        }
    }

    /// Append a transition; `new_episode` marks it as the first of an episode.
    pub fn push(&mut self, t: &Transition, new_episode: bool) -> Result<()> {
        ensure_dims("transition state", self.state_dim, t.state.len())?;
        ensure_dims("transition next state", self.state_dim, t.next_state.len())?;
        if !t.reward.is_finite() {
            return Err(Error::NonFinite("transition reward"));
        }
        match (&mut self.actions, &t.action) {
            (Some(actions), Some(a)) => {
                ensure_dims("transition action", self.action_dim, a.len())?;
                actions.extend_from_slice(a);
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::MissingActions("an action-labelled dataset")),
            (None, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "cannot add an action to an action-free dataset".into(),
                ))
            }
        }
        if new_episode || self.is_empty() {
            self.episode_starts.push(self.len() as u64);
        }
        self.states.extend_from_slice(&t.state);
        self.next_states.extend_from_slice(&t.next_state);
        self.rewards.push(t.reward);
        self.terminals.push(t.terminal);
        Ok(())
    }

    /// Append every transition of `other`, keeping its episode boundaries.
    pub fn extend_from(&mut self, other: &Dataset) -> Result<()> {
        ensure_dims("appended state dim", self.state_dim, other.state_dim)?;
        ensure_dims("appended action dim", self.action_dim, other.action_dim)?;
        for range in other.episodes() {
            for i in range.clone() {
                self.push(&other.transition(i), i == range.start)?;
            }
        }
        Ok(())
    }

    /// Half-open index ranges of each episode.
    pub fn episodes(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.episode_starts.len());
        for (k, &start) in self.episode_starts.iter().enumerate() {
            let end = self
                .episode_starts
                .get(k + 1)
                .map_or(self.len(), |&e| e as usize);
            out.push(start as usize..end);
        }
        out
    }

    /// Index of the transition following `i` within its episode, or `None`
    /// when `i` is terminal or the last of its episode.
    pub fn successor(&self, i: usize) -> Option<usize> {
        let next = i + 1;
        if next >= self.len() || self.terminals[i] {
            return None;
        }
        match self.episode_starts.binary_search(&(next as u64)) {
            Ok(_) => None,
            Err(_) => Some(next),
        }
    }

    /// Undiscounted return of every episode that ran to its horizon or hit a
    /// terminal state. A trailing episode cut short by `n` is skipped.
    pub fn episode_returns(&self, horizon: usize) -> Vec<f64> {
        self.episodes()
            .into_iter()
            .filter(|r| r.len() == horizon || self.terminals[r.end - 1])
            .map(|r| r.map(|i| f64::from(self.rewards[i])).sum())
            .collect()
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

/// Roll out `policy` for exactly `n` transitions, keeping the actions.
pub fn generate_dataset(
    spec: &EnvSpec,
    policy: &mut dyn Policy,
    quality: Quality,
    n: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    let mut ds = Dataset::new(spec.state_dim, spec.action_dim, true, quality);
    let mut state = spec.reset(rng);
    policy.begin_episode(rng);
    let mut t = 0;
    let mut fresh = true;
    while ds.len() < n {
        let action = spec.clip_action(&policy.act(&state, rng)?);
        let out = spec.step(&state, &action)?;
        ds.push(
            &Transition {
                state: to_f32(&state),
                action: Some(to_f32(&action)),
                reward: out.reward as f32,
                next_state: to_f32(&out.next_state),
                terminal: out.terminal,
            },
            fresh,
        )?;
        fresh = false;
        t += 1;
        state = out.next_state;
        if out.terminal || t == spec.horizon {
            state = spec.reset(rng);
            policy.begin_episode(rng);
            t = 0;
            fresh = true;
        }
    }
    Ok(ds)
}

/// Drop every action label. Already action-free input is returned unchanged
/// with a warning.
pub fn strip_actions(dataset: &Dataset) -> Dataset {
    if dataset.is_action_free() {
        log::warn!("dataset is already action-free; nothing to strip");
    }
    Dataset {
        actions: None,
        ..dataset.clone()
    }
}
