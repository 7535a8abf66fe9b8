//! Decomposed critic over discretised state differences.
//!
//! A member network maps a (normalised) state to an `M × B` table of
//! utilities; `Q(s, c) = (1/M) Σ_j U_j(s, c_j)`. Because `Q` is a mean of
//! per-dimension terms, every quantity that ranges over the `B^M` joint codes
//! factorises per dimension:
//!
//! * `argmax_c Q(s, c)` is the per-dimension argmax of `U_j`;
//! * `log Σ_c exp Q(s, c) = Σ_j log Σ_b exp(U_j(s, b) / M)`;
//! * `softmax_c(Q(s, c) / T)` is a product of per-dimension softmaxes of
//!   `U_j / (M T)`.
//!
//! The joint code space is never enumerated outside of tests.

use crate::discretise::{BinMode, DeltaCode};
use crate::error::{ensure_dims, Error, Result};
use crate::nn::{Activation, Gradients, Matrix, Mlp};
use crate::rng::Rng;

/// `M × B` utilities for one state, head-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityTable {
    heads: usize,
    bins: usize,
    values: Vec<f64>,
}

impl UtilityTable {
    pub fn new(heads: usize, bins: usize, values: Vec<f64>) -> Result<Self> {
        ensure_dims("utility table", heads * bins, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("utility table"));
        }
        Ok(Self {
            heads,
            bins,
            values,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn head(&self, j: usize) -> &[f64] {
        &self.values[j * self.bins..(j + 1) * self.bins]
    }

    pub fn get(&self, j: usize, digit: usize) -> f64 {
        self.values[j * self.bins + digit]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Element-wise mean of several tables of the same shape.
    pub fn mean_of(tables: &[UtilityTable]) -> Self {
        let first = &tables[0];
        let mut values = vec![0.0; first.values.len()];
        for t in tables {
            values.iter_mut().zip(&t.values).for_each(|(a, b)| *a += b);
        }
        let n = tables.len() as f64;
        values.iter_mut().for_each(|v| *v /= n);
        Self {
            heads: first.heads,
            bins: first.bins,
            values,
        }
    }

    /// `(1/M) Σ_j U_j(c_j)`.
    pub fn q_value(&self, digits: &[usize]) -> f64 {
        let total: f64 = digits
            .iter()
            .enumerate()
            .map(|(j, d)| self.get(j, *d))
            .sum();
        total / self.heads as f64
    }

    /// Per-head argmax; ties resolved by `mode.tie_order()`.
    pub fn greedy_digits(&self, mode: BinMode) -> Vec<usize> {
        (0..self.heads)
            .map(|j| argmax_with_order(self.head(j), mode.tie_order()))
            .collect()
    }

    /// `log Σ_c exp Q(s, c)` over all `B^M` codes, via the per-head identity.
    pub fn logsumexp(&self) -> f64 {
        let m = self.heads as f64;
        (0..self.heads)
            .map(|j| log_sum_exp(self.head(j).iter().map(|u| u / m)))
            .sum()
    }

    /// Per-head probabilities of the factorised joint softmax at temperature
    /// `temperature`.
    pub fn head_probabilities(&self, j: usize, temperature: f64) -> Vec<f64> {
        let scale = 1.0 / (self.heads as f64 * temperature);
        softmax(self.head(j), scale)
    }
}

fn argmax_with_order(values: &[f64], order: &[usize]) -> usize {
    let mut best = order[0];
    for &d in &order[1..] {
        if values[d] > values[best] {
            best = d;
        }
    }
    best
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(values: &[f64], scale: f64) -> Vec<f64> {
    let max = values.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b)) * scale;
    let exps: Vec<f64> = values.iter().map(|v| (v * scale - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Draw one code from the factorised softmax of `table`.
pub fn sample_digits(table: &UtilityTable, temperature: f64, rng: &mut Rng) -> Vec<usize> {
    (0..table.heads())
        .map(|j| rng.categorical(&table.head_probabilities(j, temperature)))
        .collect()
}

/// Squared or Huber temporal-difference loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TdLoss {
    Mse,
    Huber,
}

impl TdLoss {
    pub fn name(self) -> &'static str {
        match self {
            TdLoss::Mse => "mse",
            TdLoss::Huber => "huber",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mse" => Ok(TdLoss::Mse),
            "huber" => Ok(TdLoss::Huber),
            other => Err(Error::InvalidArgument(format!("unknown TD loss '{other}' (expected mse or huber)"))),
        }
    }

    fn value_and_slope(self, err: f64) -> (f64, f64) {
        match self {
            TdLoss::Mse => (err * err, 2.0 * err),
            TdLoss::Huber => {
                if err.abs() <= 1.0 {
                    (0.5 * err * err, err)
                } else {
                    (err.abs() - 0.5, err.signum())
                }
            }
        }
    }
}

/// Ensemble of decomposed critics with lagged targets. Inputs are whatever
/// the owner feeds in (normalised states for the offline model, raw states for
/// the online action-space agent).
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedQ {
    members: Vec<Mlp>,
    targets: Vec<Mlp>,
    heads: usize,
    mode: BinMode,
}

/// Per-batch breakdown of one member's loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemberLoss {
    pub td: f64,
    pub regulariser: f64,
    pub total: f64,
}

impl DecomposedQ {
    pub fn new(
        input_dim: usize,
        heads: usize,
        mode: BinMode,
        hidden: &[usize],
        ensemble: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(ensemble >= 1, "ensemble needs at least one member");
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(heads * mode.bins());
        let members: Vec<Mlp> = (0..ensemble)
            .map(|_| Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng))
            .collect();
        Self {
            targets: members.clone(),
            members,
            heads,
            mode,
        }
    }

    pub fn from_parts(members: Vec<Mlp>, targets: Vec<Mlp>, heads: usize, mode: BinMode) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("critic ensemble"));
        }
        ensure_dims("critic targets", members.len(), targets.len())?;
        for (m, t) in members.iter().zip(&targets) {
            ensure_dims("critic head width", heads * mode.bins(), m.output_dim())?;
            if m.sizes() != t.sizes() {
                return Err(Error::InvalidArgument("target shape differs from online shape".into()));
            }
        }
        Ok(Self {
            members,
            targets,
            heads,
            mode,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn mode(&self) -> BinMode {
        self.mode
    }

    pub fn bins(&self) -> usize {
        self.mode.bins()
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    pub fn member(&self, k: usize) -> &Mlp {
        &self.members[k]
    }

    pub fn member_mut(&mut self, k: usize) -> &mut Mlp {
        &mut self.members[k]
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn targets(&self) -> &[Mlp] {
        &self.targets
    }

    pub fn target(&self, k: usize) -> &Mlp {
        &self.targets[k]
    }

    pub fn utilities(&self, k: usize, input: &[f64]) -> Result<UtilityTable> {
        utilities(&self.members[k], self.heads, self.bins(), input)
    }

    pub fn target_utilities(&self, k: usize, input: &[f64]) -> Result<UtilityTable> {
        utilities(&self.targets[k], self.heads, self.bins(), input)
    }

    /// Ensemble-mean utilities.
    pub fn mean_utilities(&self, input: &[f64]) -> Result<UtilityTable> {
        let tables = (0..self.members.len())
            .map(|k| self.utilities(k, input))
            .collect::<Result<Vec<_>>>()?;
        Ok(UtilityTable::mean_of(&tables))
    }

    pub fn q_value(&self, k: usize, input: &[f64], code: &DeltaCode) -> Result<f64> {
        ensure_dims("code length", self.heads, code.len())?;
        if code.mode() != self.mode {
            return Err(Error::InvalidArgument("code bin mode differs from critic".into()));
        }
        Ok(self.utilities(k, input)?.q_value(&code.digits()))
    }

    /// Per-dimension argmax of the ensemble-mean utilities.
    pub fn greedy_code(&self, input: &[f64]) -> Result<DeltaCode> {
        let table = self.mean_utilities(input)?;
        Ok(DeltaCode::from_digits(&table.greedy_digits(self.mode), self.mode))
    }

    pub fn sample_code(&self, k: usize, input: &[f64], temperature: f64, rng: &mut Rng) -> Result<DeltaCode> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument("softmax temperature must be > 0".into()));
        }
        let table = self.utilities(k, input)?;
        Ok(DeltaCode::from_digits(&sample_digits(&table, temperature, rng), self.mode))
    }

    pub fn logsumexp_term(&self, k: usize, input: &[f64]) -> Result<f64> {
        Ok(self.utilities(k, input)?.logsumexp())
    }

    /// Batch mean of `logsumexp(s) - Q(s, c)` for member `k`.
    pub fn regulariser(&self, k: usize, inputs: &Matrix, codes: &[Vec<usize>]) -> Result<f64> {
        ensure_dims("regulariser batch", inputs.rows(), codes.len())?;
        let out = self.members[k].forward_batch(inputs)?;
        let mut total = 0.0;
        for (r, digits) in codes.iter().enumerate() {
            let table = UtilityTable::new(self.heads, self.bins(), out.row(r).to_vec())?;
            total += table.logsumexp() - table.q_value(digits);
        }
        Ok(total / codes.len().max(1) as f64)
    }

    /// Double-Q style bootstrap targets for a batch of successor states.
    ///
    /// One online member (chosen at random) samples `c'` from its factorised
    /// softmax at each successor; the bootstrap value is the minimum over two
    /// randomly chosen target members of `Q_target(s', c')`.
    pub fn td_targets(
        &self,
        next_inputs: &Matrix,
        rewards: &[f64],
        not_done: &[f64],
        discount: &[f64],
        temperature: f64,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        let n = next_inputs.rows();
        ensure_dims("td rewards", n, rewards.len())?;
        ensure_dims("td mask", n, not_done.len())?;
        ensure_dims("td discount", n, discount.len())?;
        let e = self.members.len();
        let sampler = rng.index(e);
        let first = rng.index(e);
        let second = if e > 1 {
            let k = rng.index(e - 1);
            if k >= first {
                k + 1
            } else {
                k
            }
        } else {
            first
        };
        let online = self.members[sampler].forward_batch(next_inputs)?;
        let t1 = self.targets[first].forward_batch(next_inputs)?;
        let t2 = self.targets[second].forward_batch(next_inputs)?;
        let bins = self.bins();
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let table = UtilityTable::new(self.heads, bins, online.row(r).to_vec())?;
            let digits = sample_digits(&table, temperature, rng);
            let q1 = row_q(t1.row(r), bins, &digits);
            let q2 = row_q(t2.row(r), bins, &digits);
            out.push(rewards[r] + discount[r] * not_done[r] * q1.min(q2));
        }
        Ok(out)
    }

    /// Greedy bootstrap targets: codes from the ensemble-mean online
    /// utilities, valued by the ensemble-mean target utilities.
    pub fn greedy_td_targets(
        &self,
        next_inputs: &Matrix,
        rewards: &[f64],
        not_done: &[f64],
        discount: &[f64],
    ) -> Result<Vec<f64>> {
        let n = next_inputs.rows();
        ensure_dims("td rewards", n, rewards.len())?;
        ensure_dims("td mask", n, not_done.len())?;
        ensure_dims("td discount", n, discount.len())?;
        let bins = self.bins();
        let online = self
            .members
            .iter()
            .map(|m| m.forward_batch(next_inputs))
            .collect::<Result<Vec<_>>>()?;
        let targets = self
            .targets
            .iter()
            .map(|m| m.forward_batch(next_inputs))
            .collect::<Result<Vec<_>>>()?;
        let e = self.members.len() as f64;
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let tables = online
                .iter()
                .map(|o| UtilityTable::new(self.heads, bins, o.row(r).to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let digits = UtilityTable::mean_of(&tables).greedy_digits(self.mode);
            let value = targets.iter().map(|t| row_q(t.row(r), bins, &digits)).sum::<f64>() / e;
            out.push(rewards[r] + discount[r] * not_done[r] * value);
        }
        Ok(out)
    }

    /// Loss and parameter gradient of member `k`:
    /// `mean[L(y - Q(s, c))] + α · mean[logsumexp(s) - Q(s, c)]`.
    pub fn member_loss_and_grad(
        &self,
        k: usize,
        inputs: &Matrix,
        codes: &[Vec<usize>],
        targets: &[f64],
        alpha: f64,
        loss: TdLoss,
    ) -> Result<(MemberLoss, Gradients)> {
        member_loss_and_grad(&self.members[k], self.heads, self.bins(), inputs, codes, targets, alpha, loss)
    }

    /// `θ̄ ← τ θ + (1 - τ) θ̄` for every member.
    pub fn soft_update(&mut self, tau: f64) {
        for (t, m) in self.targets.iter_mut().zip(&self.members) {
            t.soft_update_from(m, tau);
        }
    }

    pub fn sync_targets(&mut self) {
        self.targets = self.members.clone();
    }
}

fn row_q(row: &[f64], bins: usize, digits: &[usize]) -> f64 {
    let total: f64 = digits
        .iter()
        .enumerate()
        .map(|(j, d)| row[j * bins + d])
        .sum();
    total / digits.len() as f64
}

pub fn utilities(net: &Mlp, heads: usize, bins: usize, input: &[f64]) -> Result<UtilityTable> {
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("critic input"));
    }
    UtilityTable::new(heads, bins, net.forward(input)?)
}

/// Free-standing form of [`DecomposedQ::member_loss_and_grad`], usable on any
/// network with an `M·B` output.
#[allow(clippy::too_many_arguments)]
pub fn member_loss_and_grad(
    net: &Mlp,
    heads: usize,
    bins: usize,
    inputs: &Matrix,
    codes: &[Vec<usize>],
    targets: &[f64],
    alpha: f64,
    loss: TdLoss,
) -> Result<(MemberLoss, Gradients)> {
    let n = inputs.rows();
    ensure_dims("loss batch codes", n, codes.len())?;
    ensure_dims("loss batch targets", n, targets.len())?;
    let trace = net.forward_traced(inputs)?;
    let out = trace.output();
    let m = heads as f64;
    let inv_n = 1.0 / n.max(1) as f64;
    let mut upstream = Matrix::zeros(n, heads * bins);
    let mut td_total = 0.0;
    let mut reg_total = 0.0;
    for r in 0..n {
        let row = out.row(r);
        let digits = &codes[r];
        let q = row_q(row, bins, digits);
        let (l, slope) = loss.value_and_slope(targets[r] - q);
        td_total += l;
        let grad_row = upstream.row_mut(r);
        // d/dQ of L(y - Q) is -slope; dQ/dU_j(c_j) = 1/M.
        for (j, d) in digits.iter().enumerate() {
            grad_row[j * bins + d] -= slope * inv_n / m;
        }
        if alpha != 0.0 {
            let mut lse = 0.0;
            for j in 0..heads {
                let head = &row[j * bins..(j + 1) * bins];
                lse += log_sum_exp(head.iter().map(|u| u / m));
                let probs = softmax(head, 1.0 / m);
                for (b, p) in probs.iter().enumerate() {
                    grad_row[j * bins + b] += alpha * inv_n * p / m;
                }
                grad_row[j * bins + digits[j]] -= alpha * inv_n / m;
            }
            reg_total += lse - q;
        }
    }
    let (grads, _) = net.backward(&trace, &upstream)?;
    let td = td_total * inv_n;
    let regulariser = reg_total * inv_n;
    Ok((
        MemberLoss {
            td,
            regulariser,
            total: td + alpha * regulariser,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests;
