//! SGD with momentum and L2 weight decay folded into the velocity.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SnError};

use super::model::{ModelGrads, ParamRole, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to the SN control parameters as well.
    pub decay_lambda: bool,
    /// Skip updates of the SN control parameters.
    pub freeze_lambda: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_lambda: false,
            freeze_lambda: false,
        }
    }
}

/// Velocity buffers, laid out like [`ModelGrads::slices`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sgd {
    pub cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self { cfg, velocity: Vec::new() }
    }

    /// `v <- m v + g + wd θ`, then `θ <- θ - lr v`.
    pub fn step_slices(&mut self, params: Vec<(ParamRole, &mut [f64])>, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(SnError::Contract(format!(
                "{} parameter arrays but {} gradient arrays",
                params.len(),
                grads.len()
            )));
        }
        for ((_, p), g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(SnError::Contract(format!("parameter length {} vs gradient length {}", p.len(), g.len())));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        } else if self.velocity.len() != grads.len() || self.velocity.iter().zip(grads).any(|(v, g)| v.len() != g.len()) {
            return Err(SnError::Contract("gradient layout changed between steps".into()));
        }
        let SgdConfig {
            momentum,
            weight_decay,
            decay_lambda,
            freeze_lambda,
        } = self.cfg;
        for (((role, p), g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if role == ParamRole::Control && freeze_lambda {
                continue;
            }
            let wd = if role == ParamRole::Control && !decay_lambda { 0.0 } else { weight_decay };
            for ((theta, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = momentum * *vi + gi + wd * *theta;
                *theta -= lr * *vi;
            }
        }
        Ok(())
    }

    pub fn step(&mut self, model: &mut ToyModel, grads: &ModelGrads, lr: f64) -> Result<()> {
        self.step_slices(model.params_mut(), &grads.slices, lr)
    }
}
