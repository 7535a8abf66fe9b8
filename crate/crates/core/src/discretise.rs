//! Scale-invariant discretisation of state differences.
//!
//! Each dimension of `s' - s` is divided by the dataset standard deviation of
//! that dimension (the means cancel in a difference) and mapped to `-1`, `0`
//! or `+1` by an `ε` dead-zone. The two-bin variant drops the dead-zone and
//! maps a zero difference to `+1`.

use crate::env::Dataset;
use crate::error::{ensure_dims, ensure_finite, Error, Result};

pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinMode {
    Two,
    Three,
}

impl BinMode {
    pub fn bins(self) -> usize {
        match self {
            BinMode::Two => 2,
            BinMode::Three => 3,
        }
    }

    pub fn from_bins(bins: usize) -> Result<Self> {
        match bins {
            2 => Ok(BinMode::Two),
            3 => Ok(BinMode::Three),
            other => Err(Error::InvalidArgument(format!("bin count must be 2 or 3, got {other}"))),
        }
    }

    /// Code values in digit order.
    pub fn alphabet(self) -> &'static [i8] {
        match self {
            BinMode::Two => &[-1, 1],
            BinMode::Three => &[-1, 0, 1],
        }
    }

    pub fn digit(self, value: i8) -> Result<usize> {
        match (self, value) {
            (BinMode::Three, -1) | (BinMode::Two, -1) => Ok(0),
            (BinMode::Three, 0) => Ok(1),
            (BinMode::Three, 1) => Ok(2),
            (BinMode::Two, 1) => Ok(1),
            _ => Err(Error::InvalidArgument(format!(
                "code entry {value} outside the {}-bin alphabet",
                self.bins()
            ))),
        }
    }

    pub fn value(self, digit: usize) -> i8 {
        self.alphabet()[digit]
    }

    /// Digits in argmax tie-break preference: "no change" first in three-bin
    /// mode, then ascending.
    pub fn tie_order(self) -> &'static [usize] {
        match self {
            BinMode::Two => &[0, 1],
            BinMode::Three => &[1, 0, 2],
        }
    }
}

/// Which quantity the per-dimension scale is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormSource {
    States,
    Differences,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        ensure_dims("norm stats", mean.len(), std.len())?;
        ensure_finite("norm mean", &mean)?;
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("standard deviations must be positive".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalise(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// `(s' - s) / σ` per dimension.
    pub fn scaled_difference(&self, state: &[f64], next: &[f64]) -> Vec<f64> {
        next.iter()
            .zip(state)
            .zip(&self.std)
            .map(|((b, a), s)| (b - a) / s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretiserConfig {
    pub epsilon: f64,
    pub mode: BinMode,
}

impl Default for DiscretiserConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            mode: BinMode::Three,
        }
    }
}

impl DiscretiserConfig {
    pub fn three_bin(epsilon: f64) -> Self {
        Self {
            epsilon,
            mode: BinMode::Three,
        }
    }

    pub fn two_bin() -> Self {
        Self {
            epsilon: 0.0,
            mode: BinMode::Two,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.mode == BinMode::Two && self.epsilon != 0.0 {
            return Err(Error::InvalidArgument("two-bin mode has no dead-zone; epsilon must be 0".into()));
        }
        Ok(())
    }
}

/// Discretised state difference.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeltaCode {
    values: Vec<i8>,
    mode: BinMode,
}

impl DeltaCode {
    pub fn new(values: Vec<i8>, mode: BinMode) -> Result<Self> {
        for v in &values {
            mode.digit(*v)?;
        }
        Ok(Self { values, mode })
    }

    pub fn from_digits(digits: &[usize], mode: BinMode) -> Self {
        Self {
            values: digits.iter().map(|d| mode.value(*d)).collect(),
            mode,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0; dim],
            mode: BinMode::Three,
        }
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn mode(&self) -> BinMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn digits(&self) -> Vec<usize> {
        self.values
            .iter()
            .map(|v| self.mode.digit(*v).expect("validated at construction"))
            .collect()
    }

    pub fn as_reals(&self) -> Vec<f64> {
        self.values.iter().map(|v| f64::from(*v)).collect()
    }

    pub fn negated(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| -v).collect(),
            mode: self.mode,
        }
    }
}

/// Per-dimension mean and population standard deviation (floored) over every
/// state in the dataset: all first elements plus the final next-state of each
/// episode.
pub fn fit_norm_stats(dataset: &Dataset) -> Result<NormStats> {
    fit_norm_stats_from(dataset, NormSource::States)
}

pub fn fit_norm_stats_from(dataset: &Dataset, source: NormSource) -> Result<NormStats> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let m = dataset.state_dim();
    let mut acc = Welford::new(m);
    match source {
        NormSource::States => {
            for i in 0..dataset.len() {
                acc.push(dataset.state(i).iter().map(|v| f64::from(*v)));
                if dataset.successor(i).is_none() {
                    acc.push(dataset.next_state(i).iter().map(|v| f64::from(*v)));
                }
            }
        }
        NormSource::Differences => {
            for i in 0..dataset.len() {
                acc.push(
                    dataset
                        .next_state(i)
                        .iter()
                        .zip(dataset.state(i))
                        .map(|(b, a)| f64::from(*b) - f64::from(*a)),
                );
            }
        }
    }
    let (mean, std) = acc.finish();
    NormStats::new(mean, std.into_iter().map(|s| s.max(STD_FLOOR)).collect())
}

struct Welford {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: impl Iterator<Item = f64>) {
        self.count += 1.0;
        for ((v, mean), m2) in x.zip(&mut self.mean).zip(&mut self.m2) {
            let delta = v - *mean;
            *mean += delta / self.count;
            *m2 += delta * (v - *mean);
        }
    }

    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let n = self.count;
        let std = self.m2.iter().map(|m2| (m2 / n).sqrt()).collect();
        (self.mean, std)
    }
}

pub fn discretise(
    state: &[f64],
    next: &[f64],
    stats: &NormStats,
    config: &DiscretiserConfig,
) -> Result<DeltaCode> {
    ensure_dims("discretise state", stats.dim(), state.len())?;
    ensure_dims("discretise next state", stats.dim(), next.len())?;
    ensure_finite("discretise state", state)?;
    ensure_finite("discretise next state", next)?;
    Ok(discretise_scaled(&stats.scaled_difference(state, next), config))
}

/// Code an already normalised difference vector.
pub fn discretise_scaled(z: &[f64], config: &DiscretiserConfig) -> DeltaCode {
    let values = z
        .iter()
        .map(|&zi| match config.mode {
            BinMode::Three => {
                if zi > config.epsilon {
                    1
                } else if zi < -config.epsilon {
                    -1
                } else {
                    0
                }
            }
            BinMode::Two => {
                if zi < 0.0 {
                    -1
                } else {
                    1
                }
            }
        })
        .collect();
    DeltaCode {
        values,
        mode: config.mode,
    }
}

/// Base-`B` positional index, dimension 0 most significant.
pub fn code_to_index(code: &DeltaCode) -> u64 {
    let base = code.mode.bins() as u64;
    code.digits()
        .iter()
        .fold(0u64, |acc, d| acc * base + *d as u64)
}

pub fn index_to_code(index: u64, dim: usize, mode: BinMode) -> Result<DeltaCode> {
    let base = mode.bins() as u64;
    let total = base
        .checked_pow(dim as u32)
        .ok_or_else(|| Error::InvalidArgument("code space too large".into()))?;
    if index >= total {
        return Err(Error::InvalidArgument(format!("index {index} outside [0, {total})")));
    }
    let mut digits = vec![0usize; dim];
    let mut rest = index;
    for slot in digits.iter_mut().rev() {
        *slot = (rest % base) as usize;
        rest /= base;
    }
    Ok(DeltaCode::from_digits(&digits, mode))
}

/// Every code of dimension `dim`, in index order.
pub fn all_codes(dim: usize, mode: BinMode) -> Vec<DeltaCode> {
    let total = (mode.bins() as u64).pow(dim as u32);
    (0..total)
        .map(|i| index_to_code(i, dim, mode).expect("index in range"))
        .collect()
}
