//! Return normalisation, the discrete state-difference error, an
//! analysis-only expert inverse dynamics model, state-policy rollouts and
//! seed aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::discretise::{discretise, fit_norm_stats, BinMode, DeltaCode, DiscretiserConfig};
use crate::env::{Dataset, EnvSpec};
use crate::error::{ensure_dims, Error, Result};
use crate::nn::{Adam, AdamConfig, Matrix};
use crate::offline::{bin_mode_tag, ModelKind, Prediction, PretrainedModel};
use crate::online::{read_idm, write_idm, IdmInput, IdmNet};
use crate::rng::Rng;


/// Random-policy and expert returns of one environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceScores {
    pub random: f64,
    pub expert: f64,
}

impl ReferenceScores {
    pub fn new(random: f64, expert: f64) -> Result<Self> {
        if !(random.is_finite() && expert.is_finite() && expert > random) {
            return Err(Error::InvalidArgument(format!(
                "degenerate reference scores: random {random}, expert {expert}"
            )));
        }
        Ok(Self { random, expert })
    }
}

/// `100 · (raw - random) / (expert - random)`.
pub fn normalised_return(raw: f64, reference: &ReferenceScores) -> f64 {
    100.0 * (raw - reference.random) / (reference.expert - reference.random)
}

/// Per-environment reference scores, stored as `env random expert` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoresFile {
    pub scores: BTreeMap<String, ReferenceScores>,
}

impl ScoresFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut scores = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("scores line {}: expected `env random expert`", n + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            let random = parts[1].parse::<f64>().map_err(|_| bad())?;
            let expert = parts[2].parse::<f64>().map_err(|_| bad())?;
            scores.insert(parts[0].to_string(), ReferenceScores::new(random, expert)?);
        }
        Ok(Self { scores })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (env, s) in &self.scores {
            let _ = writeln!(out, "{env} {} {}", s.random, s.expert);
        }
        out
    }

    pub fn get(&self, env: &str) -> Result<ReferenceScores> {
        self.scores
            .get(env)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no reference scores for '{env}'")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Format("scores file is not UTF-8".into()))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.render().as_bytes())
    }
}

/// `Σ_i |observed_i - predicted_i|` over code entries.
pub fn diff_error(predicted: &DeltaCode, observed: &DeltaCode) -> Result<f64> {
    if predicted.mode() != observed.mode() {
        return Err(Error::InvalidArgument("diff error needs codes of the same bin mode".into()));
    }
    ensure_dims("diff error code", observed.len(), predicted.len())?;
    Ok(predicted
        .values()
        .iter()
        .zip(observed.values())
        .map(|(p, o)| f64::from((i16::from(*p) - i16::from(*o)).abs()))
        .sum())
}

/// Expected per-dimension error between two independent uniform codes,
/// by enumerating every ordered pair of alphabet values.
pub fn uniform_code_error(mode: BinMode) -> f64 {
    let alphabet = mode.alphabet();
    let total: i32 = alphabet
        .iter()
        .flat_map(|a| alphabet.iter().map(move |b| (i32::from(*a) - i32::from(*b)).abs()))
        .sum();
    f64::from(total) / (alphabet.len() * alphabet.len()) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertIdmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub holdout_fraction: f64,
    pub discretiser: DiscretiserConfig,
}

impl Default for ExpertIdmConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 512,
            learning_rate: 1e-3,
            hidden: vec![256, 256, 256],
            holdout_fraction: 0.1,
            discretiser: DiscretiserConfig::default(),
        }
    }
}

/// Code-input and continuous-input inverse dynamics models trained on
/// labelled data, used only to turn state-policy predictions into actions
/// for analysis rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertIdm {
    pub code: IdmNet,
    pub continuous: IdmNet,
    pub discretiser: DiscretiserConfig,
    /// Held-out mean absolute error per action dimension.
    pub code_heldout: Vec<f64>,
    pub continuous_heldout: Vec<f64>,
}

impl ExpertIdm {
    /// Held-out L1 of the code model summed over action dimensions, in the
    /// same units as a single online IDM loss term.
    pub fn code_heldout_total(&self) -> f64 {
        self.code_heldout.iter().sum()
    }
}

fn per_dim_l1(idm: &IdmNet, x: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
    let pred = idm.predict_batch(x)?;
    let n = a.rows().max(1) as f64;
    Ok((0..a.cols())
        .map(|j| (0..a.rows()).map(|r| (pred.get(r, j) - a.get(r, j)).abs()).sum::<f64>() / n)
        .collect())
}

pub fn train_expert_idm(dataset: &Dataset, config: &ExpertIdmConfig, rng: &mut Rng) -> Result<ExpertIdm> {
    let (m, n) = (dataset.state_dim(), dataset.action_dim());
    if !(0.0..1.0).contains(&config.holdout_fraction) || config.batch_size == 0 || config.steps == 0 {
        return Err(Error::InvalidArgument("invalid expert IDM config".into()));
    }
    config.discretiser.validate()?;
    if dataset.is_action_free() {
        return Err(Error::MissingActions("expert IDM training"));
    }
    let states: Vec<Vec<f64>> = (0..dataset.len()).map(|i| dataset.state_f64(i)).collect();
    let nexts: Vec<Vec<f64>> = (0..dataset.len()).map(|i| dataset.next_state_f64(i)).collect();
    let actions: Vec<Vec<f64>> = (0..dataset.len())
        .map(|i| dataset.action_f64(i).expect("labelled dataset"))
        .collect();
    let stats = fit_norm_stats(dataset)?;
    let low: Vec<f64> = (0..n).map(|j| actions.iter().map(|a| a[j]).fold(f64::INFINITY, f64::min)).collect();
    let high: Vec<f64> = (0..n).map(|j| actions.iter().map(|a| a[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let (low, high) = widen_bounds(low, high);
    let mut init_rng = rng.fork("expert-idm-init");
    let mut code = IdmNet::new(stats.clone(), low.clone(), high.clone(), IdmInput::Code, &config.hidden, &mut init_rng);
    let mut continuous = IdmNet::new(stats.clone(), low, high, IdmInput::Continuous, &config.hidden, &mut init_rng);

    let total = states.len();
    let mut order: Vec<usize> = (0..total).collect();
    let mut split_rng = rng.fork("expert-idm-split");
    for i in (1..total).rev() {
        order.swap(i, split_rng.index(i + 1));
    }
    let held = ((total as f64) * config.holdout_fraction).round() as usize;
    let (held_idx, train_idx) = order.split_at(held);
    if train_idx.is_empty() {
        return Err(Error::Empty("expert IDM training split"));
    }
    let build = |idx: &[usize], idm: &IdmNet| -> Result<(Matrix, Matrix)> {
        let mut x = Matrix::zeros(idx.len(), 2 * m);
        let mut a = Matrix::zeros(idx.len(), n);
        for (r, &i) in idx.iter().enumerate() {
            let feature = match idm.input {
                IdmInput::Code => discretise(&states[i], &nexts[i], &idm.stats, &config.discretiser)?.as_reals(),
                IdmInput::Continuous => idm.stats.scaled_difference(&states[i], &nexts[i]),
            };
            x.row_mut(r).copy_from_slice(&idm.features(&states[i], &feature)?);
            a.row_mut(r).copy_from_slice(&actions[i]);
        }
        Ok((x, a))
    };
    let mut heldout = Vec::new();
    for (name, idm) in [("code", &mut code), ("continuous", &mut continuous)] {
        let (train_x, train_a) = build(train_idx, idm)?;
        let mut adam = Adam::new(&idm.net, AdamConfig::with_lr(config.learning_rate));
        let mut batch_rng = rng.fork(&format!("expert-idm-{name}"));
        let b = config.batch_size.min(train_idx.len());
        let mut x = Matrix::zeros(b, 2 * m);
        let mut a = Matrix::zeros(b, n);
        for _ in 0..config.steps {
            for r in 0..b {
                let i = batch_rng.index(train_idx.len());
                x.row_mut(r).copy_from_slice(train_x.row(i));
                a.row_mut(r).copy_from_slice(train_a.row(i));
            }
            idm.update(&mut adam, (&x, &a), None)?;
        }
        let (hx, ha) = if held > 0 { build(held_idx, idm)? } else { (train_x, train_a) };
        heldout.push(per_dim_l1(idm, &hx, &ha)?);
    }
    let continuous_heldout = heldout.pop().expect("two models");
    let code_heldout = heldout.pop().expect("two models");
    Ok(ExpertIdm {
        code,
        continuous,
        discretiser: config.discretiser,
        code_heldout,
        continuous_heldout,
    })
}

/// Degenerate (constant) action columns get a unit box so the `tanh` head
/// stays well defined.
fn widen_bounds(low: Vec<f64>, high: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    low.into_iter()
        .zip(high)
        .map(|(l, h)| if h > l { (l, h) } else { (l - 0.5, h + 0.5) })
        .unzip()
}

pub const EXPERT_IDM_MAGIC: &[u8; 4] = b"EIDM";
const EXPERT_IDM_VERSION: u32 = 1;

pub fn write_expert_idm(idm: &ExpertIdm) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(EXPERT_IDM_MAGIC);
    w.u32(EXPERT_IDM_VERSION);
    w.f64(idm.discretiser.epsilon);
    w.u8(bin_mode_tag(idm.discretiser.mode));
    w.f64s(&idm.code_heldout);
    w.f64s(&idm.continuous_heldout);
    for net in [&idm.code, &idm.continuous] {
        let bytes = write_idm(net);
        w.usize(bytes.len());
        w.raw(&bytes);
    }
    w.bytes
}

pub fn read_expert_idm(bytes: &[u8]) -> Result<ExpertIdm> {
    let mut r = Reader::new(bytes);
    r.magic(EXPERT_IDM_MAGIC, "expert IDM")?;
    r.version(EXPERT_IDM_VERSION, "expert IDM")?;
    let epsilon = r.f64("epsilon")?;
    let mode = BinMode::from_bins(usize::from(r.u8("bin mode")?))?;
    let discretiser = DiscretiserConfig { epsilon, mode };
    discretiser.validate()?;
    let code_heldout = r.f64s("code held-out error")?;
    let continuous_heldout = r.f64s("continuous held-out error")?;
    let mut nets = Vec::new();
    for _ in 0..2 {
        let len = r.usize("IDM length")?;
        nets.push(read_idm(r.take(len, "IDM bytes")?)?);
    }
    r.finish("expert IDM")?;
    let continuous = nets.pop().expect("two nets");
    let code = nets.pop().expect("two nets");
    if code.input != IdmInput::Code || continuous.input != IdmInput::Continuous {
        return Err(Error::Format("expert IDM inputs are swapped".into()));
    }
    ensure_dims("expert IDM state dim", code.state_dim(), continuous.state_dim())?;
    Ok(ExpertIdm {
        code,
        continuous,
        discretiser,
        code_heldout,
        continuous_heldout,
    })
}

pub fn save_expert_idm(idm: &ExpertIdm, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &write_expert_idm(idm))
}

pub fn load_expert_idm(path: impl AsRef<Path>) -> Result<ExpertIdm> {
    read_expert_idm(&read_file(path.as_ref())?)
}

/// Rollouts of one pretrained model for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub raw_returns: Vec<f64>,
    pub normalised_returns: Vec<f64>,
    /// Per-episode mean of the per-step diff error; empty for action models.
    pub diff_errors: Vec<f64>,
}

impl EvalReport {
    pub fn mean_normalised(&self) -> f64 {
        mean(&self.normalised_returns)
    }

    pub fn mean_diff_error(&self) -> Option<f64> {
        (!self.diff_errors.is_empty()).then(|| mean(&self.diff_errors))
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Roll out `model` for `episodes` episodes, mapping its predictions to
/// actions through the frozen expert IDM (action models act directly).
pub fn rollout_state_policy(
    spec: &EnvSpec,
    model: &PretrainedModel,
    idm: &ExpertIdm,
    reference: &ReferenceScores,
    episodes: usize,
    rng: &mut Rng,
) -> Result<EvalReport> {
    model.ensure_state_dim(spec.state_dim)?;
    if episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be >= 1".into()));
    }
    ensure_dims("expert IDM state dim", spec.state_dim, idm.code.state_dim())?;
    ensure_dims("expert IDM action dim", spec.action_dim, idm.code.action_dim())?;
    let track_codes = model.kind != ModelKind::BcAction;
    let mut report = EvalReport {
        raw_returns: Vec::with_capacity(episodes),
        normalised_returns: Vec::with_capacity(episodes),
        diff_errors: Vec::new(),
    };
    for _ in 0..episodes {
        let mut state = spec.reset(rng);
        let (mut total, mut err_sum, mut steps) = (0.0, 0.0, 0usize);
        for _ in 0..spec.horizon {
            let (action, predicted) = match model.predict(&state)? {
                Prediction::Code(code) => (idm.code.predict(&state, &code)?, Some(code)),
                Prediction::Difference(d) => {
                    let guess: Vec<f64> = state.iter().zip(&d).map(|(s, d)| s + d).collect();
                    let code = discretise(&state, &guess, &model.stats, &model.discretiser)?;
                    (idm.continuous.predict_difference(&state, &d)?, Some(code))
                }
                Prediction::Action(a) => (a, None),
            };
            let out = spec.step(&state, &spec.clip_action(&action))?;
            if let Some(pred) = predicted {
                let observed = discretise(&state, &out.next_state, &model.stats, &model.discretiser)?;
                err_sum += diff_error(&pred, &observed)?;
            }
            steps += 1;
            total += out.reward;
            state = out.next_state;
            if out.terminal {
                break;
            }
        }
        report.raw_returns.push(total);
        report.normalised_returns.push(normalised_return(total, reference));
        if track_codes {
            report.diff_errors.push(err_sum / steps as f64);
        }
    }
    Ok(report)
}

/// Mean and standard error of one metric across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub group: String,
    pub metric: String,
    pub mean: f64,
    pub se: f64,
    pub n_seeds: usize,
    /// Only one seed: the standard error is reported as 0.
    pub single_seed: bool,
}

/// Mean and standard error (sample standard deviation over `√n`).
pub fn mean_se(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("aggregate values"));
    }
    let n = values.len() as f64;
    let m = mean(values);
    if values.len() == 1 {
        return Ok((m, 0.0));
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((m, (var / n).sqrt()))
}

/// One summary row per `(group, metric)` of per-seed values. Every group
/// must report the same metrics.
pub fn aggregate(per_seed: &BTreeMap<(String, String), Vec<f64>>) -> Result<Vec<SummaryRow>> {
    let mut metrics_by_group: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (group, metric) in per_seed.keys() {
        metrics_by_group.entry(group).or_default().push(metric);
    }
    let mut shapes = metrics_by_group.values();
    if let Some(first) = shapes.next() {
        if shapes.any(|s| s != first) {
            return Err(Error::InvalidArgument("groups report different metrics".into()));
        }
    }
    per_seed
        .iter()
        .map(|((group, metric), values)| {
            let (mean, se) = mean_se(values)?;
            Ok(SummaryRow {
                group: group.clone(),
                metric: metric.clone(),
                mean,
                se,
                n_seeds: values.len(),
                single_seed: values.len() == 1,
            })
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("group,metric,mean,se,n_seeds\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.group, r.metric, r.mean, r.se, r.n_seeds);
    }
    out
}

/// Column-aligned text rendering of a summary.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            let flag = if r.single_seed { " (1 seed)" } else { "" };
            [
                r.group.clone(),
                r.metric.clone(),
                format!("{:.2} ± {:.2}{flag}", r.mean, r.se),
                r.n_seeds.to_string(),
            ]
        })
        .collect();
    let header = ["group", "metric", "mean ± se", "seeds"];
    let mut width = header.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cols: &[&str]| {
        let padded: Vec<String> = cols
            .iter()
            .zip(width)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&mut out, &header);
    for row in &cells {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}
