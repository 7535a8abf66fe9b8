use crate::error::{Error, Result};

use super::{Gradients, Mlp};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = net
            .layers()
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect();
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Gradients are validated before any
    /// parameter is touched.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if let Some(layer) = grads.first_non_finite_layer() {
            return Err(Error::NonFiniteGradient { layer });
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);
        let mut slot = 0;
        for (layer, grad) in net.layers_mut().iter_mut().zip(&grads.layers) {
            for (params, g) in [
                (&mut layer.weights, &grad.weights),
                (&mut layer.bias, &grad.bias),
            ] {
                let m = &mut self.first[slot];
                let v = &mut self.second[slot];
                for i in 0..params.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / correct1;
                    let v_hat = v[i] / correct2;
                    let update = learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                    params[i] = (f64::from(params[i]) - update) as f32;
                }
                slot += 1;
            }
        }
        Ok(())
    }
}
