use crate::error::{ensure_dims, Error, Result};
use crate::rng::Rng;

use super::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    /// The ReLU subgradient at zero is zero.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Tanh),
            other => Err(Error::Format(format!("unknown activation tag {other}"))),
        }
    }
}

/// Fully connected layer. Weights are stored `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Uniform fan-in initialisation with bound `1/sqrt(inputs)`.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = || rng.uniform_in(-bound, bound) as f32;
        let weights = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Self {
            inputs,
            outputs,
            weights,
            bias,
            activation,
        }
    }

    fn weight_row(&self, o: usize) -> &[f32] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients, laid out like the layers of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= factor);
            l.bias.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Flattened in the same order as [`Mlp::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Index of the first layer holding a non-finite entry.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| {
            l.weights.iter().any(|g| !g.is_finite()) || l.bias.iter().any(|g| !g.is_finite())
        })
    }
}

/// Intermediates of a batched forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    output: Matrix,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// Network with layer widths `sizes` (input first, output last). Hidden
    /// layers use `hidden`, the last layer uses `output`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        Self::build(sizes, hidden, output, |i, o, a| Dense::init(i, o, a, rng))
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        Self::build(sizes, hidden, output, Dense::zeros)
    }

    fn build(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        mut make: impl FnMut(usize, usize, Activation) -> Dense,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output widths");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| make(w[0], w[1], if i == last { output } else { hidden }))
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layer list"));
        }
        for (i, l) in layers.iter().enumerate() {
            ensure_dims("layer weights", l.inputs * l.outputs, l.weights.len())?;
            ensure_dims("layer bias", l.outputs, l.bias.len())?;
            if i > 0 {
                ensure_dims("layer chaining", layers[i - 1].outputs, l.inputs)?;
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("layer parameters"));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameters in layer order, weights before bias within a layer.
    pub fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f32]) -> Result<()> {
        ensure_dims("flat parameters", self.param_count(), params.len())?;
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + n]);
            offset += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(&Matrix::row_vector(input))?.into_vec())
    }

    /// Batched forward pass without keeping intermediates.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        ensure_dims("network input", self.input_dim(), x.cols())?;
        let mut current = affine(&self.layers[0], x);
        activate_in_place(self.layers[0].activation, &mut current);
        for layer in &self.layers[1..] {
            let mut next = affine(layer, &current);
            activate_in_place(layer.activation, &mut next);
            current = next;
        }
        Ok(current)
    }

    pub fn forward_traced(&self, x: &Matrix) -> Result<Trace> {
        ensure_dims("network input", self.input_dim(), x.cols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let z = affine(layer, &current);
            let mut y = z.clone();
            activate_in_place(layer.activation, &mut y);
            inputs.push(current);
            pre_activations.push(z);
            current = y;
        }
        Ok(Trace {
            inputs,
            pre_activations,
            output: current,
        })
    }

    /// Back-propagate `upstream = dL/d(output)` through a traced pass.
    /// Returns parameter gradients and `dL/d(input)`.
    pub fn backward(&self, trace: &Trace, upstream: &Matrix) -> Result<(Gradients, Matrix)> {
        ensure_dims("upstream rows", trace.output.rows(), upstream.rows())?;
        ensure_dims("upstream cols", self.output_dim(), upstream.cols())?;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = upstream.clone();
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre_activations[idx];
            let output = if idx == last {
                &trace.output
            } else {
                &trace.inputs[idx + 1]
            };
            if layer.activation != Activation::Identity {
                for (d, (zv, yv)) in delta
                    .as_mut_slice()
                    .iter_mut()
                    .zip(z.as_slice().iter().zip(output.as_slice()))
                {
                    *d *= layer.activation.derivative(*zv, *yv);
                }
            }
            let input = &trace.inputs[idx];
            let g = &mut grads.layers[idx];
            for b in 0..delta.rows() {
                let x = input.row(b);
                for (o, &d) in delta.row(b).iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter_mut().zip(x).for_each(|(w, xv)| *w += d * xv);
                }
            }
            let mut dx = Matrix::zeros(delta.rows(), layer.inputs);
            for b in 0..delta.rows() {
                let dx_row = dx.row_mut(b);
                for (o, &d) in delta.row(b).iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    dx_row
                        .iter_mut()
                        .zip(layer.weight_row(o))
                        .for_each(|(acc, w)| *acc += d * f64::from(*w));
                }
            }
            delta = dx;
        }
        Ok((grads, delta))
    }

    /// `self <- tau * source + (1 - tau) * self`, element-wise.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            for (a, b) in t.weights.iter_mut().zip(&s.weights) {
                *a = (tau * f64::from(*b) + (1.0 - tau) * f64::from(*a)) as f32;
            }
            for (a, b) in t.bias.iter_mut().zip(&s.bias) {
                *a = (tau * f64::from(*b) + (1.0 - tau) * f64::from(*a)) as f32;
            }
        }
    }
}

fn affine(layer: &Dense, x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), layer.outputs);
    for b in 0..x.rows() {
        let input = x.row(b);
        let out_row = out.row_mut(b);
        for (o, slot) in out_row.iter_mut().enumerate() {
            *slot = f64::from(layer.bias[o]) + dot(layer.weight_row(o), input);
        }
    }
    out
}

/// Dot product with independent partial sums so the loop vectorises.
#[inline]
fn dot(w: &[f32], x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let wc = w.chunks_exact(8);
    let xc = x.chunks_exact(8);
    let tail: f64 = wc
        .remainder()
        .iter()
        .zip(xc.remainder())
        .map(|(a, b)| f64::from(*a) * b)
        .sum();
    for (wb, xb) in wc.zip(xc) {
        for k in 0..8 {
            acc[k] += f64::from(wb[k]) * xb[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn activate_in_place(activation: Activation, m: &mut Matrix) {
    if activation != Activation::Identity {
        m.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = activation.apply(*v));
    }
}
