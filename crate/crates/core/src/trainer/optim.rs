use crate::error::{BtnError, Result};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state laid out in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    /// `v = momentum * v + g`, `theta -= lr * v`.
    Sgd { momentum: f64, velocity: Vec<Tensor<f64>> },
    /// Bias-corrected Adam.
    Adam {
        step: u64,
        m: Vec<Tensor<f64>>,
        v: Vec<Tensor<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd {
                momentum,
                velocity: zeros(),
            },
            OptimizerKind::Adam => Optimizer::Adam {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd { .. } => OptimizerKind::Sgd,
            Optimizer::Adam { .. } => OptimizerKind::Adam,
        }
    }

    /// Adam's step counter (0 for SGD).
    pub fn step_count(&self) -> u64 {
        match self {
            Optimizer::Sgd { .. } => 0,
            Optimizer::Adam { step, .. } => *step,
        }
    }

    pub fn state(&self) -> Vec<&Tensor<f64>> {
        match self {
            Optimizer::Sgd { velocity, .. } => velocity.iter().collect(),
            Optimizer::Adam { m, v, .. } => m.iter().chain(v.iter()).collect(),
        }
    }

    /// Rebuilds state read back from a checkpoint.
    pub fn restore(kind: OptimizerKind, momentum: f64, step: u64, mut tensors: Vec<Tensor<f64>>, n_params: usize) -> Result<Self> {
        let expected = match kind {
            OptimizerKind::Sgd => n_params,
            OptimizerKind::Adam => 2 * n_params,
        };
        if tensors.len() != expected {
            return Err(BtnError::Malformed {
                what: "checkpoint optimizer state".into(),
                reason: format!("expected {expected} tensors, found {}", tensors.len()),
            });
        }
        Ok(match kind {
            OptimizerKind::Sgd => Optimizer::Sgd {
                momentum,
                velocity: tensors,
            },
            OptimizerKind::Adam => {
                let v = tensors.split_off(n_params);
                Optimizer::Adam { step, m: tensors, v }
            }
        })
    }

    pub fn apply(&mut self, params: Vec<&mut Tensor<f64>>, grads: &[Tensor<f64>], lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd { momentum, velocity } => {
                for ((p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
                    p.ensure_same_shape(g, "sgd step")?;
                    for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = *momentum * *vi + gi;
                        *pi -= lr * *vi;
                    }
                }
            }
            Optimizer::Adam { step, m, v } => {
                *step += 1;
                let t = *step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), mt), vt) in params.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    p.ensure_same_shape(g, "adam step")?;
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(mt.data_mut()).zip(vt.data_mut());
                    for (((pi, &gi), mi), vi) in it {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
