//! Offline trainers on logged `(s, r, s')` data: the regularised decomposed
//! critic over state-difference codes, its unregularised ablation, and the
//! imitation baselines.

mod model;

pub use model::{
    load_model, loss_trace_csv, read_model, save_model, write_model, ModelBody, Prediction,
    PretrainedModel, MODEL_MAGIC, MODEL_VERSION,
};

use crate::critic::{log_sum_exp, softmax, DecomposedQ, TdLoss};
use crate::discretise::{discretise, fit_norm_stats, BinMode, DiscretiserConfig, NormStats};
use crate::env::Dataset;
use crate::error::{Error, Result};
use crate::nn::{mse, Activation, Adam, AdamConfig, Gradients, Matrix, Mlp};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Oso,
    DecqnN,
    BcDelta,
    BcNextState,
    BcDiff,
    BcAction,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Oso,
        ModelKind::DecqnN,
        ModelKind::BcDelta,
        ModelKind::BcNextState,
        ModelKind::BcDiff,
        ModelKind::BcAction,
    ];

    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Oso => 0,
            ModelKind::DecqnN => 1,
            ModelKind::BcDelta => 2,
            ModelKind::BcNextState => 3,
            ModelKind::BcDiff => 4,
            ModelKind::BcAction => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or_else(|| Error::Format(format!("unknown model kind tag {tag}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Oso => "oso",
            ModelKind::DecqnN => "decqn_n",
            ModelKind::BcDelta => "bc_delta",
            ModelKind::BcNextState => "bc_sprime",
            ModelKind::BcDiff => "bc_diff",
            ModelKind::BcAction => "bc_a",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown algorithm '{name}' (expected oso, decqn_n, bc_delta, bc_sprime, bc_diff, bc_a)"
            ))
        })
    }

    pub fn is_critic(self) -> bool {
        matches!(self, ModelKind::Oso | ModelKind::DecqnN)
    }
}

/// Continuous regression target of the imitation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionTarget {
    /// Normalised next state `(s' - μ) / σ`.
    NextState,
    /// Scaled difference `(s' - s) / σ`.
    Difference,
    /// Raw action.
    Action,
}

impl RegressionTarget {
    pub fn kind(self) -> ModelKind {
        match self {
            RegressionTarget::NextState => ModelKind::BcNextState,
            RegressionTarget::Difference => ModelKind::BcDiff,
            RegressionTarget::Action => ModelKind::BcAction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub n_step: usize,
    pub discretiser: DiscretiserConfig,
    pub ensemble: usize,
    pub hidden: Vec<usize>,
    pub tau: f64,
    /// Temperature of the softmax that samples bootstrap codes.
    pub temperature: f64,
    pub loss: TdLoss,
    pub log_every: usize,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            steps: 200_000,
            batch_size: 256,
            learning_rate: 1e-4,
            gamma: 0.99,
            alpha: 5.0,
            n_step: 1,
            discretiser: DiscretiserConfig::default(),
            ensemble: 5,
            hidden: vec![256, 256, 256],
            tau: 1e-3,
            temperature: 1.0,
            loss: TdLoss::Mse,
            log_every: 1000,
        }
    }
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be a finite value >= 0");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.steps == 0 || self.batch_size == 0 || self.n_step == 0 || self.ensemble == 0 {
            return bad("steps, batch size, n-step and ensemble size must be >= 1");
        }
        if self.log_every == 0 {
            return bad("log interval must be >= 1");
        }
        if self.hidden.iter().any(|h| *h == 0) {
            return bad("hidden widths must be >= 1");
        }
        self.discretiser.validate()
    }
}

/// One row of a training-loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub reg_term: f64,
}

/// Per-transition quantities precomputed once per training run.
struct Prepared {
    m: usize,
    inputs: Vec<f64>,
    bootstrap: Vec<f64>,
    returns: Vec<f64>,
    discount: Vec<f64>,
    not_done: Vec<f64>,
    codes: Vec<Vec<usize>>,
}

impl Prepared {
    fn new(ds: &Dataset, stats: &NormStats, config: &OfflineConfig) -> Result<Self> {
        let m = ds.state_dim();
        let n = ds.len();
        let mut p = Prepared {
            m,
            inputs: Vec::with_capacity(n * m),
            bootstrap: Vec::with_capacity(n * m),
            returns: Vec::with_capacity(n),
            discount: Vec::with_capacity(n),
            not_done: Vec::with_capacity(n),
            codes: Vec::with_capacity(n),
        };
        for i in 0..n {
            let s = ds.state_f64(i);
            p.inputs.extend(stats.normalise(&s));
            p.codes
                .push(discretise(&s, &ds.next_state_f64(i), stats, &config.discretiser)?.digits());
            let (mut j, mut acc, mut g, mut alive) = (i, 0.0, 1.0, 1.0);
            for step in 0..config.n_step {
                acc += g * f64::from(ds.reward(j));
                g *= config.gamma;
                if ds.terminal(j) {
                    alive = 0.0;
                    break;
                }
                match ds.successor(j) {
                    Some(next) if step + 1 < config.n_step => j = next,
                    _ => break,
                }
            }
            p.bootstrap.extend(stats.normalise(&ds.next_state_f64(j)));
            p.returns.push(acc);
            p.discount.push(g);
            p.not_done.push(alive);
        }
        Ok(p)
    }

    fn gather(&self, source: &[f64], idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.m);
        for &i in idx {
            data.extend_from_slice(&source[i * self.m..(i + 1) * self.m]);
        }
        Matrix::from_vec(idx.len(), self.m, data).expect("gathered shape")
    }
}

fn sample_indices(n: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.index(n)).collect()
}

fn check_training_data(ds: &Dataset, config: &OfflineConfig, need_actions: bool) -> Result<()> {
    config.validate()?;
    if ds.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if config.batch_size > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} exceeds dataset size {}",
            config.batch_size,
            ds.len()
        )));
    }
    if need_actions && ds.is_action_free() {
        return Err(Error::MissingActions("action regression"));
    }
    if !need_actions && !ds.is_action_free() {
        return Err(Error::InvalidArgument(
            "state-only trainers expect an action-free dataset; strip actions first".into(),
        ));
    }
    Ok(())
}

fn adam_step(opt: &mut Adam, net: &mut Mlp, grads: &Gradients, loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged { step });
    }
    opt.step(net, grads).map_err(|e| diverged(e, step))
}

/// Non-finite intermediate values during training mean the run blew up.
fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(_) | Error::NonFiniteGradient { .. } => Error::Diverged { step },
        other => other,
    }
}

fn should_log(step: usize, config: &OfflineConfig) -> bool {
    step % config.log_every == 0 || step == config.steps
}

/// Regularised decomposed critic over state-difference codes.
pub fn oso_decqn_train(dataset: &Dataset, config: &OfflineConfig, rng: &mut Rng) -> Result<PretrainedModel> {
    train_critic(ModelKind::Oso, dataset, config, rng)
}

/// The same pipeline without the regulariser.
pub fn decqn_n_train(dataset: &Dataset, config: &OfflineConfig, rng: &mut Rng) -> Result<PretrainedModel> {
    let config = OfflineConfig {
        alpha: 0.0,
        ..config.clone()
    };
    train_critic(ModelKind::DecqnN, dataset, &config, rng)
}

fn train_critic(kind: ModelKind, ds: &Dataset, config: &OfflineConfig, rng: &mut Rng) -> Result<PretrainedModel> {
    check_training_data(ds, config, false)?;
    let stats = fit_norm_stats(ds)?;
    let data = Prepared::new(ds, &stats, config)?;
    let m = ds.state_dim();
    let mut critic = DecomposedQ::new(
        m,
        m,
        config.discretiser.mode,
        &config.hidden,
        config.ensemble,
        &mut rng.fork("critic-init"),
    );
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut opts: Vec<Adam> = critic.members().iter().map(|net| Adam::new(net, adam)).collect();
    let mut batches = rng.fork("batches");
    let mut trace = Vec::new();
    for step in 1..=config.steps {
        let (mut loss_sum, mut reg_sum) = (0.0, 0.0);
        for (k, opt) in opts.iter_mut().enumerate() {
            let idx = sample_indices(ds.len(), config.batch_size, &mut batches);
            let x = data.gather(&data.inputs, &idx);
            let boot = data.gather(&data.bootstrap, &idx);
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let targets = critic.td_targets(
                &boot,
                &pick(&data.returns),
                &pick(&data.not_done),
                &pick(&data.discount),
                config.temperature,
                &mut batches,
            )
            .map_err(|e| diverged(e, step))?;
            let codes: Vec<Vec<usize>> = idx.iter().map(|&i| data.codes[i].clone()).collect();
            let (loss, grads) = critic
                .member_loss_and_grad(k, &x, &codes, &targets, config.alpha, config.loss)
                .map_err(|e| diverged(e, step))?;
            adam_step(opt, critic.member_mut(k), &grads, loss.total, step)?;
            loss_sum += loss.total;
            reg_sum += loss.regulariser;
        }
        critic.soft_update(config.tau);
        if should_log(step, config) {
            let e = config.ensemble as f64;
            trace.push(LossRecord {
                step: step as u64,
                loss: loss_sum / e,
                reg_term: reg_sum / e,
            });
        }
    }
    Ok(PretrainedModel {
        kind,
        state_dim: m,
        action_dim: 0,
        stats,
        discretiser: config.discretiser,
        config: config.clone(),
        body: ModelBody::Critic(critic),
        trace,
    })
}

fn mlp_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// Per-head cross-entropy `Σ_j [LSE_b z_j(b) - z_j(c_j)]`, averaged over the
/// batch, and its gradient with respect to the network parameters.
pub fn cross_entropy_loss_and_grad(
    net: &Mlp,
    heads: usize,
    bins: usize,
    inputs: &Matrix,
    codes: &[Vec<usize>],
) -> Result<(f64, Gradients)> {
    crate::error::ensure_dims("cross-entropy codes", inputs.rows(), codes.len())?;
    let trace = net.forward_traced(inputs)?;
    let out = trace.output();
    let n = inputs.rows();
    let inv_n = 1.0 / n.max(1) as f64;
    let mut upstream = Matrix::zeros(n, heads * bins);
    let mut total = 0.0;
    for (r, digits) in codes.iter().enumerate() {
        let row = out.row(r);
        let grad = upstream.row_mut(r);
        for (j, &d) in digits.iter().enumerate() {
            let head = &row[j * bins..(j + 1) * bins];
            total += log_sum_exp(head.iter().copied()) - head[d];
            for (b, p) in softmax(head, 1.0).iter().enumerate() {
                grad[j * bins + b] = p * inv_n;
            }
            grad[j * bins + d] -= inv_n;
        }
    }
    let (grads, _) = net.backward(&trace, &upstream)?;
    Ok((total * inv_n, grads))
}

/// Classifier over per-dimension codes with the critic's architecture.
pub fn bc_delta_train(ds: &Dataset, config: &OfflineConfig, rng: &mut Rng) -> Result<PretrainedModel> {
    check_training_data(ds, config, false)?;
    let stats = fit_norm_stats(ds)?;
    let data = Prepared::new(ds, &stats, &OfflineConfig { n_step: 1, ..config.clone() })?;
    let m = ds.state_dim();
    let bins = config.discretiser.mode.bins();
    let mut net = Mlp::new(
        &mlp_sizes(m, &config.hidden, m * bins),
        Activation::Relu,
        Activation::Identity,
        &mut rng.fork("bc-init"),
    );
    let mut opt = Adam::new(&net, AdamConfig::with_lr(config.learning_rate));
    let mut batches = rng.fork("batches");
    let mut trace = Vec::new();
    for step in 1..=config.steps {
        let idx = sample_indices(ds.len(), config.batch_size, &mut batches);
        let x = data.gather(&data.inputs, &idx);
        let codes: Vec<Vec<usize>> = idx.iter().map(|&i| data.codes[i].clone()).collect();
        let (loss, grads) = cross_entropy_loss_and_grad(&net, m, bins, &x, &codes)?;
        adam_step(&mut opt, &mut net, &grads, loss, step)?;
        if should_log(step, config) {
            trace.push(LossRecord {
                step: step as u64,
                loss,
                reg_term: 0.0,
            });
        }
    }
    Ok(PretrainedModel {
        kind: ModelKind::BcDelta,
        state_dim: m,
        action_dim: 0,
        stats,
        discretiser: config.discretiser,
        config: config.clone(),
        body: ModelBody::Network(net),
        trace,
    })
}

/// Mean-squared-error regression from the normalised state to a continuous
/// target.
pub fn bc_regression_train(
    ds: &Dataset,
    target: RegressionTarget,
    config: &OfflineConfig,
    rng: &mut Rng,
) -> Result<PretrainedModel> {
    check_training_data(ds, config, target == RegressionTarget::Action)?;
    let stats = fit_norm_stats(ds)?;
    let m = ds.state_dim();
    let out_dim = match target {
        RegressionTarget::Action => ds.action_dim(),
        _ => m,
    };
    let mut inputs = Vec::with_capacity(ds.len() * m);
    let mut targets = Vec::with_capacity(ds.len() * out_dim);
    for i in 0..ds.len() {
        let s = ds.state_f64(i);
        inputs.extend(stats.normalise(&s));
        match target {
            RegressionTarget::NextState => targets.extend(stats.normalise(&ds.next_state_f64(i))),
            RegressionTarget::Difference => {
                targets.extend(stats.scaled_difference(&s, &ds.next_state_f64(i)))
            }
            RegressionTarget::Action => targets.extend(ds.action_f64(i).expect("checked above")),
        }
    }
    let mut net = Mlp::new(
        &mlp_sizes(m, &config.hidden, out_dim),
        Activation::Relu,
        Activation::Identity,
        &mut rng.fork("bc-init"),
    );
    let mut opt = Adam::new(&net, AdamConfig::with_lr(config.learning_rate));
    let mut batches = rng.fork("batches");
    let mut trace = Vec::new();
    let rows = |src: &[f64], width: usize, idx: &[usize]| {
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        Matrix::from_vec(idx.len(), width, data).expect("gathered shape")
    };
    for step in 1..=config.steps {
        let idx = sample_indices(ds.len(), config.batch_size, &mut batches);
        let x = rows(&inputs, m, &idx);
        let y = rows(&targets, out_dim, &idx);
        let trace_fwd = net.forward_traced(&x)?;
        let (loss, upstream) = mse(trace_fwd.output(), &y);
        let (grads, _) = net.backward(&trace_fwd, &upstream)?;
        adam_step(&mut opt, &mut net, &grads, loss, step)?;
        if should_log(step, config) {
            trace.push(LossRecord {
                step: step as u64,
                loss,
                reg_term: 0.0,
            });
        }
    }
    Ok(PretrainedModel {
        kind: target.kind(),
        state_dim: m,
        action_dim: if target == RegressionTarget::Action { ds.action_dim() } else { 0 },
        stats,
        discretiser: config.discretiser,
        config: config.clone(),
        body: ModelBody::Network(net),
        trace,
    })
}

/// Dispatch on `kind`.
pub fn train_model(kind: ModelKind, ds: &Dataset, config: &OfflineConfig, rng: &mut Rng) -> Result<PretrainedModel> {
    match kind {
        ModelKind::Oso => oso_decqn_train(ds, config, rng),
        ModelKind::DecqnN => decqn_n_train(ds, config, rng),
        ModelKind::BcDelta => bc_delta_train(ds, config, rng),
        ModelKind::BcNextState => bc_regression_train(ds, RegressionTarget::NextState, config, rng),
        ModelKind::BcDiff => bc_regression_train(ds, RegressionTarget::Difference, config, rng),
        ModelKind::BcAction => bc_regression_train(ds, RegressionTarget::Action, config, rng),
    }
}

pub(crate) fn bin_mode_tag(mode: BinMode) -> u8 {
    mode.bins() as u8
}
