//! Gaussian-increment MDPs on a state grid, mean-increment binning into `k`
//! evenly spaced bins, exact value iteration on both, and the resulting
//! value-gap and KL-mismatch checks.

use std::collections::HashMap;
use std::fmt::Write as _;

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::rng::Rng;


/// Probability mass that may be dropped by the finite Gaussian window before
/// the kernel is rejected.
pub const TRUNCATION_BUDGET: f64 = 1e-6;
/// Gaussian window half-width, in standard deviations.
const WINDOW_SIGMAS: f64 = 9.0;
/// Allowed excess of the grid-projected ε_KL over the closed-form bound.
pub const GRID_SLACK: f64 = 0.1;

/// `r(s, μ) = (1 - w) · exp(-|s|² / (2 width²)) + w · (1 - |μ|² / (M · μ_max²))`,
/// which lies in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSpec {
    pub width: f64,
    pub action_weight: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            width: 2.0,
            action_weight: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementMdpConfig {
    /// State dimension `M`.
    pub dims: usize,
    /// Grid points run from `-half_width` to `half_width` in steps of `grid_step`.
    pub half_width: f64,
    pub grid_step: f64,
    /// Mean-increment box `[mean_low, mean_high]^M`.
    pub mean_low: f64,
    pub mean_high: f64,
    /// Regular lattice of mean increments per coordinate (corners included).
    pub lattice_points: usize,
    /// Extra mean increments drawn uniformly from the box.
    pub random_actions: usize,
    /// Per-coordinate increment standard deviation (`Σ = σ² I`).
    pub sigma: f64,
    pub gamma: f64,
    pub reward: RewardSpec,
}

impl Default for IncrementMdpConfig {
    fn default() -> Self {
        Self {
            dims: 1,
            half_width: 6.0,
            grid_step: 0.5,
            mean_low: -1.0,
            mean_high: 1.0,
            lattice_points: 17,
            random_actions: 0,
            sigma: 1.0,
            gamma: 0.9,
            reward: RewardSpec::default(),
        }
    }
}

impl IncrementMdpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("increment MDP: {msg}")));
        if !(1..=3).contains(&self.dims) {
            return bad("dimension must be 1, 2 or 3");
        }
        if !(self.grid_step > 0.0 && self.half_width > 0.0) {
            return bad("grid step and half width must be positive");
        }
        if !(self.mean_low < self.mean_high) || !self.mean_low.is_finite() || !self.mean_high.is_finite() {
            return bad("mean box must satisfy low < high");
        }
        if self.lattice_points < 2 && self.random_actions == 0 {
            return bad("need at least two lattice points or some random actions");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.reward.width > 0.0 && (0.0..=1.0).contains(&self.reward.action_weight)) {
            return bad("reward width must be positive and action weight in [0, 1]");
        }
        Ok(())
    }

    /// `H = δ_max - δ_min`.
    pub fn mean_width(&self) -> f64 {
        self.mean_high - self.mean_low
    }

    /// `Λ = λ_max(Σ⁻¹)`.
    pub fn lambda(&self) -> f64 {
        1.0 / (self.sigma * self.sigma)
    }
}

/// Finite MDP on a product grid with separable, reflected Gaussian increments.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementMdp {
    pub config: IncrementMdpConfig,
    /// Grid coordinates shared by every dimension.
    pub coords: Vec<f64>,
    /// Mean increment of each action.
    pub means: Vec<Vec<f64>>,
    /// Row-major `n × n` per-coordinate kernels, `kernel[i][j] = P(j | i)`.
    kernels: Vec<Vec<f64>>,
    /// Kernel index per action and dimension.
    action_kernels: Vec<Vec<usize>>,
    /// Largest probability mass dropped by the Gaussian window.
    pub truncation: f64,
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Fold an unbounded cell index onto `0..n` by reflection at both walls.
fn reflect(u: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let r = u.rem_euclid(period) as usize;
    if r < n {
        r
    } else {
        2 * n - 1 - r
    }
}

/// One-coordinate kernel for mean increment `mu`: the Gaussian mass of each
/// grid cell, with mass beyond the walls reflected back. Returns the kernel
/// and the largest mass lost to the finite window.
pub fn coordinate_kernel(coords: &[f64], step: f64, mu: f64, sigma: f64) -> (Vec<f64>, f64) {
    let n = coords.len();
    let left = coords[0] - 0.5 * step;
    let mut kernel = vec![0.0; n * n];
    let mut lost = 0.0f64;
    for (i, &x) in coords.iter().enumerate() {
        let centre = x + mu;
        // The window always spans the whole grid so every cell keeps its
        // (possibly tiny) Gaussian mass and all rows share one support.
        let lo = (((centre - WINDOW_SIGMAS * sigma - left) / step).floor() as i64).min(0);
        let hi = (((centre + WINDOW_SIGMAS * sigma - left) / step).ceil() as i64).max(n as i64);
        let row = &mut kernel[i * n..(i + 1) * n];
        let mut total = 0.0;
        for u in lo..hi {
            let a = (left + u as f64 * step - centre) / sigma;
            let b = (left + (u + 1) as f64 * step - centre) / sigma;
            let mass = if a > 0.0 {
                normal_cdf(-a) - normal_cdf(-b)
            } else {
                normal_cdf(b) - normal_cdf(a)
            };
            row[reflect(u, n)] += mass;
            total += mass;
        }
        lost = lost.max(1.0 - total);
        row.iter_mut().for_each(|p| *p /= total);
    }
    (kernel, lost)
}

impl IncrementMdp {
    pub fn build(config: &IncrementMdpConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let n = (2.0 * config.half_width / config.grid_step).round() as usize + 1;
        let coords: Vec<f64> = (0..n).map(|j| -config.half_width + j as f64 * config.grid_step).collect();
        let m = config.dims;
        let mut means = Vec::new();
        if config.lattice_points >= 2 {
            let q = config.lattice_points;
            let values: Vec<f64> = (0..q)
                .map(|j| config.mean_low + config.mean_width() * j as f64 / (q - 1) as f64)
                .collect();
            let total = q.pow(m as u32);
            for idx in 0..total {
                let mut rest = idx;
                let mut mu = vec![0.0; m];
                for d in (0..m).rev() {
                    mu[d] = values[rest % q];
                    rest /= q;
                }
                means.push(mu);
            }
        }
        for _ in 0..config.random_actions {
            means.push((0..m).map(|_| rng.uniform_in(config.mean_low, config.mean_high)).collect());
        }
        Self::with_means(config.clone(), coords, means)
    }

    fn with_means(config: IncrementMdpConfig, coords: Vec<f64>, means: Vec<Vec<f64>>) -> Result<Self> {
        let mut cache: HashMap<u64, usize> = HashMap::new();
        let mut kernels = Vec::new();
        let mut action_kernels = Vec::with_capacity(means.len());
        let mut truncation = 0.0f64;
        for mu in &means {
            let mut ids = Vec::with_capacity(mu.len());
            for &v in mu {
                let id = *cache.entry(v.to_bits()).or_insert_with(|| {
                    let (k, lost) = coordinate_kernel(&coords, config.grid_step, v, config.sigma);
                    truncation = truncation.max(lost);
                    kernels.push(k);
                    kernels.len() - 1
                });
                ids.push(id);
            }
            action_kernels.push(ids);
        }
        if truncation > TRUNCATION_BUDGET {
            return Err(Error::InvalidArgument(format!(
                "kernel truncation {truncation:e} exceeds the budget {TRUNCATION_BUDGET:e}"
            )));
        }
        Ok(Self {
            config,
            coords,
            means,
            kernels,
            action_kernels,
            truncation,
        })
    }

    pub fn dims(&self) -> usize {
        self.config.dims
    }

    pub fn grid_size(&self) -> usize {
        self.coords.len()
    }

    pub fn state_count(&self) -> usize {
        self.grid_size().pow(self.dims() as u32)
    }

    pub fn action_count(&self) -> usize {
        self.means.len()
    }

    /// Grid coordinate indices of state `s` (dimension 0 most significant).
    pub fn state_indices(&self, s: usize) -> Vec<usize> {
        let n = self.grid_size();
        let mut out = vec![0; self.dims()];
        let mut rest = s;
        for d in (0..self.dims()).rev() {
            out[d] = rest % n;
            rest /= n;
        }
        out
    }

    pub fn state(&self, s: usize) -> Vec<f64> {
        self.state_indices(s).into_iter().map(|i| self.coords[i]).collect()
    }

    /// Per-coordinate kernel row of action `a` for dimension `d` at grid
    /// index `i`.
    pub fn kernel_row(&self, a: usize, d: usize, i: usize) -> &[f64] {
        let n = self.grid_size();
        &self.kernels[self.action_kernels[a][d]][i * n..(i + 1) * n]
    }

    /// Full next-state distribution of `(s, a)`.
    pub fn transition(&self, s: usize, a: usize) -> Vec<f64> {
        let idx = self.state_indices(s);
        let mut dist = vec![1.0];
        for (d, &i) in idx.iter().enumerate() {
            let row = self.kernel_row(a, d, i);
            dist = dist.iter().flat_map(|p| row.iter().map(move |q| p * q)).collect();
        }
        dist
    }

    fn mu_scale(&self) -> f64 {
        self.config.mean_low.abs().max(self.config.mean_high.abs())
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        let spec = self.config.reward;
        let x = self.state(s);
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let mu2: f64 = self.means[a].iter().map(|v| v * v).sum();
        let state_term = (-r2 / (2.0 * spec.width * spec.width)).exp();
        let action_term = 1.0 - mu2 / (self.dims() as f64 * self.mu_scale().powi(2));
        (1.0 - spec.action_weight) * state_term + spec.action_weight * action_term
    }

    /// `E[V(s') | s, a]` for every `s`, by applying the per-coordinate
    /// kernels along each axis.
    pub fn expectation(&self, a: usize, v: &[f64]) -> Vec<f64> {
        let n = self.grid_size();
        let m = self.dims();
        let mut cur = v.to_vec();
        let mut next = vec![0.0; cur.len()];
        for d in 0..m {
            let kernel = &self.kernels[self.action_kernels[a][d]];
            let stride = n.pow((m - 1 - d) as u32);
            let block = stride * n;
            for outer in (0..cur.len()).step_by(block) {
                for inner in 0..stride {
                    for i in 0..n {
                        let row = &kernel[i * n..(i + 1) * n];
                        let mut acc = 0.0;
                        for (j, p) in row.iter().enumerate() {
                            acc += p * cur[outer + j * stride + inner];
                        }
                        next[outer + i * stride + inner] = acc;
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Dense tabular copy (for small MDPs and cross-checks).
    pub fn to_tabular(&self) -> TabularMdp {
        let states = self.state_count();
        TabularMdp {
            transitions: (0..self.action_count())
                .map(|a| (0..states).map(|s| self.transition(s, a)).collect())
                .collect(),
            rewards: (0..states)
                .map(|s| (0..self.action_count()).map(|a| self.reward(s, a)).collect())
                .collect(),
            gamma: self.config.gamma,
        }
    }
}

/// Generic finite MDP: `transitions[a][s][s']`, `rewards[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
    pub gamma: f64,
}

/// Fixed point of the Bellman optimality operator.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSolution {
    pub values: Vec<f64>,
    pub iterations: usize,
    /// `‖T V_t - V_t‖∞` of every sweep.
    pub residuals: Vec<f64>,
}

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 100_000;

fn iterate(states: usize, tol: f64, max_iter: usize, mut sweep: impl FnMut(&[f64]) -> Vec<f64>) -> Result<ValueSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let mut v = vec![0.0; states];
    let mut residuals = Vec::new();
    for it in 1..=max_iter {
        let next = sweep(&v);
        let residual = next.iter().zip(&v).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        residuals.push(residual);
        v = next;
        if residual < tol {
            return Ok(ValueSolution {
                values: v,
                iterations: it,
                residuals,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

pub fn value_iteration(mdp: &IncrementMdp, tol: f64, max_iter: usize) -> Result<ValueSolution> {
    let rewards: Vec<Vec<f64>> = (0..mdp.action_count())
        .map(|a| (0..mdp.state_count()).map(|s| mdp.reward(s, a)).collect())
        .collect();
    let gamma = mdp.config.gamma;
    iterate(mdp.state_count(), tol, max_iter, |v| {
        let mut best = vec![f64::NEG_INFINITY; v.len()];
        for (a, r) in rewards.iter().enumerate() {
            let ev = mdp.expectation(a, v);
            for s in 0..v.len() {
                best[s] = best[s].max(r[s] + gamma * ev[s]);
            }
        }
        best
    })
}

pub fn value_iteration_tabular(mdp: &TabularMdp, tol: f64, max_iter: usize) -> Result<ValueSolution> {
    if !(0.0..1.0).contains(&mdp.gamma) {
        return Err(Error::InvalidArgument("gamma must lie in [0, 1)".into()));
    }
    let states = mdp.rewards.len();
    iterate(states, tol, max_iter, |v| {
        (0..states)
            .map(|s| {
                (0..mdp.transitions.len())
                    .map(|a| {
                        let ev: f64 = mdp.transitions[a][s].iter().zip(v).map(|(p, x)| p * x).sum();
                        mdp.rewards[s][a] + mdp.gamma * ev
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    })
}

/// The same MDP with every action replaced by the representative of its
/// mean-increment bin (a synthesised action whose mean is the bin centre).
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedMdp {
    pub k: usize,
    pub mdp: IncrementMdp,
    /// Representative index of each original action.
    pub assignment: Vec<usize>,
}

impl BinnedMdp {
    /// Every action is its own representative.
    pub fn identity(mdp: &IncrementMdp) -> Self {
        Self {
            k: 0,
            mdp: mdp.clone(),
            assignment: (0..mdp.action_count()).collect(),
        }
    }
}

pub fn bin_actions(mdp: &IncrementMdp, k: usize) -> Result<BinnedMdp> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let c = &mdp.config;
    let width = c.mean_width() / k as f64;
    let mut reps: Vec<Vec<usize>> = Vec::new();
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut assignment = Vec::with_capacity(mdp.action_count());
    for mu in &mdp.means {
        let bin: Vec<usize> = mu
            .iter()
            .map(|v| (((v - c.mean_low) / width).floor().max(0.0) as usize).min(k - 1))
            .collect();
        let id = *index.entry(bin.clone()).or_insert_with(|| {
            reps.push(bin);
            reps.len() - 1
        });
        assignment.push(id);
    }
    let means = reps
        .iter()
        .map(|bin| bin.iter().map(|&b| c.mean_low + (b as f64 + 0.5) * width).collect())
        .collect();
    Ok(BinnedMdp {
        k,
        mdp: IncrementMdp::with_means(c.clone(), mdp.coords.clone(), means)?,
        assignment,
    })
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| if *b > 0.0 { a * (a / b).ln() } else { f64::INFINITY })
        .sum()
}

/// Symmetrised KL mismatch and its closed-form Gaussian counterpart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlMismatch {
    /// `sup_s sup_a min(KL(P_a ‖ P_b(a)), KL(P_b(a) ‖ P_a))` on the grid.
    pub grid: f64,
    /// `sup_a ½ (μ - μ̄)ᵀ Σ⁻¹ (μ - μ̄)` before grid projection.
    pub closed_form: f64,
}

pub fn kl_mismatch(mdp: &IncrementMdp, binned: &BinnedMdp) -> Result<KlMismatch> {
    if binned.assignment.len() != mdp.action_count() || binned.mdp.coords != mdp.coords {
        return Err(Error::InvalidArgument("binned MDP does not match the original".into()));
    }
    let n = mdp.grid_size();
    let m = mdp.dims();
    let lambda = mdp.config.lambda();
    let mut grid = 0.0f64;
    let mut closed_form = 0.0f64;
    for (a, &rep) in binned.assignment.iter().enumerate() {
        // Per-coordinate KLs in both directions, then every state combination.
        let mut fwd = vec![vec![0.0; n]; m];
        let mut rev = vec![vec![0.0; n]; m];
        for d in 0..m {
            for i in 0..n {
                let p = mdp.kernel_row(a, d, i);
                let q = binned.mdp.kernel_row(rep, d, i);
                fwd[d][i] = kl(p, q);
                rev[d][i] = kl(q, p);
            }
        }
        for s in 0..mdp.state_count() {
            let idx = mdp.state_indices(s);
            let f: f64 = idx.iter().enumerate().map(|(d, &i)| fwd[d][i]).sum();
            let r: f64 = idx.iter().enumerate().map(|(d, &i)| rev[d][i]).sum();
            grid = grid.max(f.min(r));
        }
        let dist2: f64 = mdp.means[a]
            .iter()
            .zip(&binned.mdp.means[rep])
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        closed_form = closed_form.max(0.5 * lambda * dist2);
    }
    if !grid.is_finite() {
        return Err(Error::InvalidArgument("next-state supports differ".into()));
    }
    Ok(KlMismatch { grid, closed_form })
}

/// `Δ_r/(1-γ) + γ/(1-γ)² · Δ_r · √(ε/2)`.
pub fn lemma2_bound(delta_r: f64, gamma: f64, eps_kl: f64) -> f64 {
    delta_r / (1.0 - gamma) + gamma / (1.0 - gamma).powi(2) * delta_r * (eps_kl / 2.0).sqrt()
}

/// `Λ M H² / (8 k²)`.
pub fn theorem_kl_bound(lambda: f64, dims: usize, mean_width: f64, k: usize) -> f64 {
    lambda * dims as f64 * mean_width * mean_width / (8.0 * (k * k) as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub k: usize,
    pub gap: f64,
    pub lemma2_bound: f64,
    pub eps_kl: f64,
    pub eps_kl_closed_form: f64,
    pub eps_kl_theorem_bound: f64,
    /// Largest `|μ - μ̄|₂` over actions.
    pub max_mean_offset: f64,
    pub representatives: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub dims: usize,
    pub gamma: f64,
    pub delta_r: f64,
    pub rows: Vec<BoundRow>,
    /// Fitted slope of `ln √ε_KL` against `ln k` (NaN with fewer than two k).
    pub slope_estimate: f64,
    pub violations: Vec<String>,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn ensure_holds(&self) -> Result<()> {
        if self.holds() {
            Ok(())
        } else {
            Err(Error::Bound(self.violations.join("; ")))
        }
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("k,gap,lemma2_bound,eps_kl,eps_kl_theorem_bound,slope_estimate\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.k, r.gap, r.lemma2_bound, r.eps_kl, r.eps_kl_theorem_bound, self.slope_estimate
            );
        }
        out
    }
}

/// Solve the original MDP and the binned MDP for every `k`, and compare the
/// value gap and KL mismatch against their bounds.
pub fn check_bound(mdp: &IncrementMdp, k_list: &[usize], tol: f64) -> Result<BoundReport> {
    if k_list.is_empty() || k_list.windows(2).any(|w| w[0] >= w[1]) || k_list[0] == 0 {
        return Err(Error::InvalidArgument("k list must be non-empty, ascending and >= 1".into()));
    }
    let c = &mdp.config;
    let v_star = value_iteration(mdp, tol, MAX_ITERATIONS)?;
    let mut binned_all = Vec::new();
    for &k in k_list {
        binned_all.push(bin_actions(mdp, k)?);
    }
    let reward_range = |m: &IncrementMdp| {
        (0..m.state_count())
            .flat_map(|s| (0..m.action_count()).map(move |a| (s, a)))
            .map(|(s, a)| m.reward(s, a))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)))
    };
    let (mut r_min, mut r_max) = reward_range(mdp);
    for b in &binned_all {
        let (lo, hi) = reward_range(&b.mdp);
        r_min = r_min.min(lo);
        r_max = r_max.max(hi);
    }
    let delta_r = r_max - r_min;
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for (binned, &k) in binned_all.iter().zip(k_list) {
        let v_d = value_iteration(&binned.mdp, tol, MAX_ITERATIONS)?;
        let gap = v_star
            .values
            .iter()
            .zip(&v_d.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let eps = kl_mismatch(mdp, binned)?;
        let bound = lemma2_bound(delta_r, c.gamma, eps.grid);
        let theorem = theorem_kl_bound(c.lambda(), c.dims, c.mean_width(), k);
        let max_mean_offset = mdp
            .means
            .iter()
            .zip(&binned.assignment)
            .map(|(mu, &r)| {
                mu.iter()
                    .zip(&binned.mdp.means[r])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0f64, f64::max);
        if gap > bound {
            violations.push(format!("k={k}: value gap {gap} exceeds the value-gap bound {bound}"));
        }
        if eps.grid > (1.0 + GRID_SLACK) * theorem {
            violations.push(format!("k={k}: eps_kl {} exceeds (1 + slack) x {theorem}", eps.grid));
        }
        rows.push(BoundRow {
            k,
            gap,
            lemma2_bound: bound,
            eps_kl: eps.grid,
            eps_kl_closed_form: eps.closed_form,
            eps_kl_theorem_bound: theorem,
            max_mean_offset,
            representatives: binned.mdp.action_count(),
        });
    }
    let positive: Vec<&BoundRow> = rows.iter().filter(|r| r.eps_kl > 0.0).collect();
    let slope_estimate = if positive.len() >= 2 {
        let ks: Vec<f64> = positive.iter().map(|r| r.k as f64).collect();
        let roots: Vec<f64> = positive.iter().map(|r| r.eps_kl.sqrt()).collect();
        log_log_slope(&ks, &roots)
    } else {
        f64::NAN
    };
    Ok(BoundReport {
        dims: c.dims,
        gamma: c.gamma,
        delta_r,
        rows,
        slope_estimate,
        violations,
    })
}

/// Worst observed ratios in the expectation-difference chain
/// `|E_P f - E_Q f| ≤ sp(f)·TV(P, Q) ≤ sp(f)·√(KL/2)`; both must be ≤ 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinskerCheck {
    pub worst_tv_ratio: f64,
    pub worst_pinsker_ratio: f64,
    pub samples: usize,
}

pub fn pinsker_check(
    mdp: &IncrementMdp,
    binned: &BinnedMdp,
    f: &[f64],
    samples: usize,
    rng: &mut Rng,
) -> Result<PinskerCheck> {
    if f.len() != mdp.state_count() {
        return Err(Error::dims("test function", mdp.state_count(), f.len()));
    }
    let span = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - f.iter().cloned().fold(f64::INFINITY, f64::min);
    let (mut worst_tv, mut worst_pinsker) = (0.0f64, 0.0f64);
    for _ in 0..samples {
        let s = rng.index(mdp.state_count());
        let a = rng.index(mdp.action_count());
        let p = mdp.transition(s, a);
        let q = binned.mdp.transition(s, binned.assignment[a]);
        let diff: f64 = p.iter().zip(&q).zip(f).map(|((x, y), v)| (x - y) * v).sum::<f64>().abs();
        let tv = 0.5 * p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum::<f64>();
        let kl_pq = kl(&p, &q);
        if diff > 1e-14 {
            worst_tv = worst_tv.max(diff / (span * tv));
        }
        if tv > 1e-14 {
            worst_pinsker = worst_pinsker.max(tv / (kl_pq / 2.0).sqrt());
        }
    }
    Ok(PinskerCheck {
        worst_tv_ratio: worst_tv,
        worst_pinsker_ratio: worst_pinsker,
        samples,
    })
}
