use std::path::Path;

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::discretise::{DeltaCode, NormStats};
use crate::error::{ensure_dims, Error, Result};
use crate::nn::{l1, Activation, Adam, Gradients, Matrix, Mlp};
use crate::rng::Rng;

pub const IDM_MAGIC: &[u8; 4] = b"IDMF";
pub const IDM_VERSION: u32 = 1;

/// What the IDM receives next to the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdmInput {
    /// A state-difference code embedded as reals in {-1, 0, +1}.
    Code,
    /// A continuous scaled difference `(s' - s) / σ`.
    Continuous,
}

impl IdmInput {
    fn tag(self) -> u8 {
        match self {
            IdmInput::Code => 0,
            IdmInput::Continuous => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(IdmInput::Code),
            1 => Ok(IdmInput::Continuous),
            other => Err(Error::Format(format!("unknown IDM input tag {other}"))),
        }
    }
}

/// Inverse dynamics model `(s, Δ) -> a`, `tanh`-squashed into the action box.
#[derive(Debug, Clone, PartialEq)]
pub struct IdmNet {
    pub net: Mlp,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    /// Normalisation applied to the state input (the pretrained model's).
    pub stats: NormStats,
    pub input: IdmInput,
}

/// Value of one two-term IDM update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdmLoss {
    pub total: f64,
    pub online: f64,
    pub offline: f64,
}

impl IdmNet {
    pub fn new(
        stats: NormStats,
        low: Vec<f64>,
        high: Vec<f64>,
        input: IdmInput,
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Self {
        let m = stats.dim();
        let mut sizes = vec![2 * m];
        sizes.extend_from_slice(hidden);
        sizes.push(low.len());
        Self {
            net: Mlp::new(&sizes, Activation::Relu, Activation::Tanh, rng),
            low,
            high,
            stats,
            input,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.stats.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.low.len()
    }

    fn half_range(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    /// Network input row for `(s, feature)`.
    pub fn features(&self, state: &[f64], feature: &[f64]) -> Result<Vec<f64>> {
        ensure_dims("IDM state", self.state_dim(), state.len())?;
        ensure_dims("IDM feature", self.state_dim(), feature.len())?;
        let mut row = self.stats.normalise(state);
        row.extend_from_slice(feature);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("IDM input"));
        }
        Ok(row)
    }

    fn scale_row(&self, squashed: &mut [f64]) {
        for (i, u) in squashed.iter_mut().enumerate() {
            *u = 0.5 * (self.low[i] + self.high[i]) + 0.5 * (self.high[i] - self.low[i]) * *u;
        }
    }

    pub fn predict_features(&self, state: &[f64], feature: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.net.forward(&self.features(state, feature)?)?;
        self.scale_row(&mut out);
        Ok(out)
    }

    /// `I(s, code)`; a pure function of its inputs.
    pub fn predict(&self, state: &[f64], code: &DeltaCode) -> Result<Vec<f64>> {
        if self.input != IdmInput::Code {
            return Err(Error::InvalidArgument("this IDM expects continuous differences".into()));
        }
        self.predict_features(state, &code.as_reals())
    }

    /// `I(s, (s' - s) / σ)` for continuous-target models; `difference` is raw.
    pub fn predict_difference(&self, state: &[f64], difference: &[f64]) -> Result<Vec<f64>> {
        if self.input != IdmInput::Continuous {
            return Err(Error::InvalidArgument("this IDM expects codes".into()));
        }
        let scaled: Vec<f64> = difference.iter().zip(&self.stats.std).map(|(d, s)| d / s).collect();
        self.predict_features(state, &scaled)
    }

    pub fn predict_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut out = self.net.forward_batch(inputs)?;
        for r in 0..out.rows() {
            self.scale_row(out.row_mut(r));
        }
        Ok(out)
    }

    /// L1 loss `mean_rows Σ_dims |a - I(x)|` and its parameter gradient.
    pub fn l1_loss_and_grad(&self, inputs: &Matrix, actions: &Matrix) -> Result<(f64, Gradients)> {
        ensure_dims("IDM targets", inputs.rows(), actions.rows())?;
        let trace = self.net.forward_traced(inputs)?;
        let mut pred = trace.output().clone();
        for r in 0..pred.rows() {
            self.scale_row(pred.row_mut(r));
        }
        let (loss, mut upstream) = l1(&pred, actions);
        let half = self.half_range();
        for r in 0..upstream.rows() {
            upstream.row_mut(r).iter_mut().zip(&half).for_each(|(g, h)| *g *= h);
        }
        let (grads, _) = self.net.backward(&trace, &upstream)?;
        Ok((loss, grads))
    }

    /// One Adam step on
    /// `‖a_on,off - I(s_off, Δs_off)‖₁ + ‖a - I(s, Δs)‖₁`.
    pub fn update(
        &mut self,
        adam: &mut Adam,
        online: (&Matrix, &Matrix),
        offline: Option<(&Matrix, &Matrix)>,
    ) -> Result<IdmLoss> {
        let (on_loss, mut grads) = self.l1_loss_and_grad(online.0, online.1)?;
        let mut off_loss = 0.0;
        if let Some((x, a)) = offline {
            let (l, g) = self.l1_loss_and_grad(x, a)?;
            off_loss = l;
            grads.add_assign(&g);
        }
        adam.step(&mut self.net, &grads)?;
        Ok(IdmLoss {
            total: on_loss + off_loss,
            online: on_loss,
            offline: off_loss,
        })
    }
}

pub fn write_idm(idm: &IdmNet) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(IDM_MAGIC);
    w.u32(IDM_VERSION);
    w.u8(idm.input.tag());
    w.f64s(&idm.low);
    w.f64s(&idm.high);
    w.f64s(&idm.stats.mean);
    w.f64s(&idm.stats.std);
    w.mlp(&idm.net);
    w.bytes
}

pub fn read_idm(bytes: &[u8]) -> Result<IdmNet> {
    let mut r = Reader::new(bytes);
    r.magic(IDM_MAGIC, "IDM")?;
    r.version(IDM_VERSION, "IDM")?;
    let input = IdmInput::from_tag(r.u8("IDM input")?)?;
    let low = r.f64s("action low")?;
    let high = r.f64s("action high")?;
    let stats = NormStats::new(r.f64s("norm mean")?, r.f64s("norm std")?)?;
    let net = r.mlp()?;
    r.finish("IDM network")?;
    ensure_dims("IDM bounds", low.len(), high.len())?;
    ensure_dims("IDM input width", 2 * stats.dim(), net.input_dim())?;
    ensure_dims("IDM output width", low.len(), net.output_dim())?;
    Ok(IdmNet {
        net,
        low,
        high,
        stats,
        input,
    })
}

pub fn save_idm(idm: &IdmNet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &write_idm(idm))
}

pub fn load_idm(path: impl AsRef<Path>) -> Result<IdmNet> {
    read_idm(&read_file(path.as_ref())?)
}
