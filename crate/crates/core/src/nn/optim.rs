//! SGD with momentum and Adam, following the usual PyTorch update rules.

use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

/// Hyperparameters of an optimizer, without its moment buffers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f32,
    #[serde(default)]
    pub weight_decay: f32,
}

impl OptimizerConfig {
    pub fn sgd(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum },
            lr,
            weight_decay,
        }
    }

    pub fn adam(lr: f32) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay: 0.0,
        }
    }

    pub fn build(self, len: usize) -> OptimizerState {
        OptimizerState::new(self, len)
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    first: Vec<f32>,
    second: Vec<f32>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, len: usize) -> Self {
        let second = match config.kind {
            OptimizerKind::Adam { .. } => vec![0.0; len],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            config,
            first: vec![0.0; len],
            second,
            steps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    /// Applies one update in place. Rejects non-finite gradients and any
    /// update that would leave a non-finite parameter.
    pub fn step(&mut self, params: &mut ParamVector, grad: &[f32]) -> Result<(), NnError> {
        if params.len() != self.len() || grad.len() != self.len() {
            return Err(NnError::ParamCount {
                expected: self.len(),
                actual: if params.len() != self.len() {
                    params.len()
                } else {
                    grad.len()
                },
            });
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFinite {
                what: "gradient",
                index,
            });
        }
        self.steps += 1;
        let lr = self.config.lr;
        let wd = self.config.weight_decay;
        let theta = params.as_mut_slice();
        match self.config.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, &g), buf) in theta.iter_mut().zip(grad).zip(&mut self.first) {
                    let g = if wd != 0.0 { g + wd * *p } else { g };
                    *buf = momentum * *buf + g;
                    *p -= lr * *buf;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let bc1 = 1.0 - (beta1 as f64).powi(t);
                let bc2 = 1.0 - (beta2 as f64).powi(t);
                let step_size = (lr as f64 / bc1) as f32;
                let bc2_sqrt = bc2.sqrt() as f32;
                for (((p, &g), m), v) in theta
                    .iter_mut()
                    .zip(grad)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let g = if wd != 0.0 { g + wd * *p } else { g };
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
                }
            }
        }
        if let Some(index) = theta.iter().position(|p| !p.is_finite()) {
            return Err(NnError::NonFinite {
                what: "parameter",
                index,
            });
        }
        Ok(())
    }
}
