//! Pretrained-model container.
//!
//! ```text
//! "OSOM" | version u32 | kind u8 | M u32 | N u32
//! config   : steps u64 | batch u64 | lr f64 | gamma f64 | alpha f64 | n_step u64
//!            | ensemble u64 | hidden (len u64, u64...) | tau f64 | temperature f64
//!            | loss u8 | log_every u64
//! coder    : epsilon f64 | bins u8 | mean (len, f64...) | std (len, f64...)
//! body     : tag u8; critic = heads u32 | members u32 | online nets | target nets,
//!            network = one net. A net is its layer shapes then f32 payload.
//! trace    : rows u64 | (step u64, loss f64, reg f64)...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::critic::{DecomposedQ, TdLoss, UtilityTable};
use crate::discretise::{BinMode, DeltaCode, DiscretiserConfig, NormStats};
use crate::error::{ensure_dims, Error, Result};
use crate::nn::Mlp;

use super::{bin_mode_tag, LossRecord, ModelKind, OfflineConfig};

pub const MODEL_MAGIC: &[u8; 4] = b"OSOM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelBody {
    Critic(DecomposedQ),
    Network(Mlp),
}

/// What a pretrained model recommends for a state.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Code(DeltaCode),
    /// Predicted `s' - s` in raw state units.
    Difference(Vec<f64>),
    Action(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedModel {
    pub kind: ModelKind,
    pub state_dim: usize,
    /// Only meaningful for action regression; zero otherwise.
    pub action_dim: usize,
    pub stats: NormStats,
    pub discretiser: DiscretiserConfig,
    pub config: OfflineConfig,
    pub body: ModelBody,
    pub trace: Vec<LossRecord>,
}

impl PretrainedModel {
    pub fn critic(&self) -> Option<&DecomposedQ> {
        match &self.body {
            ModelBody::Critic(c) => Some(c),
            ModelBody::Network(_) => None,
        }
    }

    /// Explicit error when the model was trained for another state width.
    pub fn ensure_state_dim(&self, state_dim: usize) -> Result<()> {
        ensure_dims("pretrained model state dim", state_dim, self.state_dim)
    }

    pub fn mode(&self) -> BinMode {
        self.discretiser.mode
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        ensure_dims("model state", self.state_dim, state.len())?;
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model state"));
        }
        Ok(())
    }

    /// Greedy state-difference code; only for code-valued models.
    pub fn greedy_code(&self, state: &[f64]) -> Result<DeltaCode> {
        self.check_state(state)?;
        let z = self.stats.normalise(state);
        match (&self.body, self.kind) {
            (ModelBody::Critic(c), _) => c.greedy_code(&z),
            (ModelBody::Network(net), ModelKind::BcDelta) => {
                let table = UtilityTable::new(self.state_dim, self.mode().bins(), net.forward(&z)?)?;
                Ok(DeltaCode::from_digits(&table.greedy_digits(self.mode()), self.mode()))
            }
            _ => Err(Error::InvalidArgument(format!(
                "model '{}' does not predict codes",
                self.kind.name()
            ))),
        }
    }

    /// Ensemble-mean `Q(s, greedy code)`; only for critics.
    pub fn greedy_value(&self, state: &[f64]) -> Result<f64> {
        self.check_state(state)?;
        let critic = self
            .critic()
            .ok_or_else(|| Error::InvalidArgument("model has no critic".into()))?;
        let table = critic.mean_utilities(&self.stats.normalise(state))?;
        Ok(table.q_value(&table.greedy_digits(self.mode())))
    }

    pub fn predict(&self, state: &[f64]) -> Result<Prediction> {
        self.check_state(state)?;
        match self.kind {
            ModelKind::Oso | ModelKind::DecqnN | ModelKind::BcDelta => {
                Ok(Prediction::Code(self.greedy_code(state)?))
            }
            _ => {
                let ModelBody::Network(net) = &self.body else {
                    return Err(Error::Format("regression model without a network".into()));
                };
                let out = net.forward(&self.stats.normalise(state))?;
                let (mean, std) = (&self.stats.mean, &self.stats.std);
                Ok(match self.kind {
                    ModelKind::BcNextState => Prediction::Difference(
                        (0..self.state_dim)
                            .map(|i| mean[i] + std[i] * out[i] - state[i])
                            .collect(),
                    ),
                    ModelKind::BcDiff => {
                        Prediction::Difference((0..self.state_dim).map(|i| std[i] * out[i]).collect())
                    }
                    _ => Prediction::Action(out),
                })
            }
        }
    }
}

fn loss_tag(loss: TdLoss) -> u8 {
    match loss {
        TdLoss::Mse => 0,
        TdLoss::Huber => 1,
    }
}

pub fn write_model(model: &PretrainedModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.u8(model.kind.tag());
    w.u32(model.state_dim as u32);
    w.u32(model.action_dim as u32);
    let c = &model.config;
    w.usize(c.steps);
    w.usize(c.batch_size);
    w.f64(c.learning_rate);
    w.f64(c.gamma);
    w.f64(c.alpha);
    w.usize(c.n_step);
    w.usize(c.ensemble);
    w.usize(c.hidden.len());
    c.hidden.iter().for_each(|h| w.usize(*h));
    w.f64(c.tau);
    w.f64(c.temperature);
    w.u8(loss_tag(c.loss));
    w.usize(c.log_every);
    w.f64(model.discretiser.epsilon);
    w.u8(bin_mode_tag(model.discretiser.mode));
    w.f64s(&model.stats.mean);
    w.f64s(&model.stats.std);
    match &model.body {
        ModelBody::Critic(critic) => {
            w.u8(0);
            w.u32(critic.heads() as u32);
            w.u32(critic.ensemble_size() as u32);
            critic.members().iter().for_each(|n| w.mlp(n));
            critic.targets().iter().for_each(|n| w.mlp(n));
        }
        ModelBody::Network(net) => {
            w.u8(1);
            w.mlp(net);
        }
    }
    w.usize(model.trace.len());
    for row in &model.trace {
        w.u64(row.step);
        w.f64(row.loss);
        w.f64(row.reg_term);
    }
    w.bytes
}

pub fn read_model(bytes: &[u8]) -> Result<PretrainedModel> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC, "model")?;
    r.version(MODEL_VERSION, "model")?;
    let kind = ModelKind::from_tag(r.u8("model kind")?)?;
    let state_dim = r.u32("state dim")? as usize;
    let action_dim = r.u32("action dim")? as usize;
    let steps = r.usize("steps")?;
    let batch_size = r.usize("batch size")?;
    let learning_rate = r.f64("learning rate")?;
    let gamma = r.f64("gamma")?;
    let alpha = r.f64("alpha")?;
    let n_step = r.usize("n-step")?;
    let ensemble = r.usize("ensemble")?;
    let hidden_len = r.usize("hidden count")?;
    if hidden_len > 64 {
        return Err(Error::Format(format!("implausible hidden layer count {hidden_len}")));
    }
    let hidden = (0..hidden_len)
        .map(|_| r.usize("hidden width"))
        .collect::<Result<Vec<_>>>()?;
    let tau = r.f64("tau")?;
    let temperature = r.f64("temperature")?;
    let loss = match r.u8("loss kind")? {
        0 => TdLoss::Mse,
        1 => TdLoss::Huber,
        other => return Err(Error::Format(format!("unknown loss tag {other}"))),
    };
    let log_every = r.usize("log interval")?;
    let epsilon = r.f64("epsilon")?;
    let mode = BinMode::from_bins(r.u8("bin mode")? as usize)?;
    let discretiser = DiscretiserConfig { epsilon, mode };
    let stats = NormStats::new(r.f64s("norm mean")?, r.f64s("norm std")?)?;
    ensure_dims("model normalisation stats", state_dim, stats.dim())?;
    let body = match r.u8("body tag")? {
        0 => {
            let heads = r.u32("critic heads")? as usize;
            let members = r.u32("critic members")? as usize;
            if members == 0 || members > 1024 {
                return Err(Error::Format(format!("implausible ensemble size {members}")));
            }
            let online = (0..members).map(|_| r.mlp()).collect::<Result<Vec<_>>>()?;
            let targets = (0..members).map(|_| r.mlp()).collect::<Result<Vec<_>>>()?;
            let critic = DecomposedQ::from_parts(online, targets, heads, mode)?;
            ensure_dims("critic heads", state_dim, heads)?;
            ensure_dims("critic input", state_dim, critic.input_dim())?;
            ModelBody::Critic(critic)
        }
        1 => {
            let net = r.mlp()?;
            ensure_dims("network input", state_dim, net.input_dim())?;
            let expected = match kind {
                ModelKind::BcDelta => state_dim * mode.bins(),
                ModelKind::BcAction => action_dim,
                _ => state_dim,
            };
            ensure_dims("network output", expected, net.output_dim())?;
            ModelBody::Network(net)
        }
        other => return Err(Error::Format(format!("unknown body tag {other}"))),
    };
    if kind.is_critic() != matches!(body, ModelBody::Critic(_)) {
        return Err(Error::Format("model kind does not match its body".into()));
    }
    let rows = r.usize("trace length")?;
    if rows.saturating_mul(24) > r.remaining() {
        return Err(Error::Truncated("loss trace"));
    }
    let mut trace = Vec::with_capacity(rows);
    for _ in 0..rows {
        trace.push(LossRecord {
            step: r.u64("trace step")?,
            loss: r.f64("trace loss")?,
            reg_term: r.f64("trace reg")?,
        });
    }
    r.finish("loss trace")?;
    Ok(PretrainedModel {
        kind,
        state_dim,
        action_dim,
        stats,
        discretiser,
        config: OfflineConfig {
            steps,
            batch_size,
            learning_rate,
            gamma,
            alpha,
            n_step,
            discretiser,
            ensemble,
            hidden,
            tau,
            temperature,
            loss,
            log_every,
        },
        body,
        trace,
    })
}

pub fn save_model(model: &PretrainedModel, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &write_model(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PretrainedModel> {
    read_model(&read_file(path.as_ref())?)
}

/// `step,loss,reg_term` CSV of a loss trace.
pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from("step,loss,reg_term\n");
    for row in trace {
        let _ = writeln!(out, "{},{},{}", row.step, row.loss, row.reg_term);
    }
    out
}
