use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::tensor::Tensor;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum OptimAlgorithm {
    Adamw,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub algorithm: OptimAlgorithm,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            algorithm: OptimAlgorithm::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state: hyperparameters, per-parameter moments, step counter.
#[derive(Clone, Debug)]
pub struct OptimState<T: Real> {
    pub config: OptimConfig,
    pub lr: f64,
    step: u64,
    moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> OptimState<T> {
    pub fn new(config: OptimConfig, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            config,
            lr,
            step: 0,
            moments: IndexMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.moments.get(name)
    }

    /// Applies one update to every `(name, param, grad)` triple.
    pub fn step<'p>(
        &mut self,
        updates: impl IntoIterator<Item = (&'p str, &'p mut Tensor<T>, &'p Tensor<T>)>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let lr = T::lit(self.lr);
        let wd = T::lit(c.weight_decay);
        for (name, param, grad) in updates {
            if param.shape() != grad.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("{name}: param {:?}, grad {:?}", param.shape(), grad.shape()),
                ));
            }
            match c.algorithm {
                OptimAlgorithm::Sgd => {
                    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= lr * (g + wd * *p);
                    }
                }
                OptimAlgorithm::Adamw => {
                    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
                    let eps = T::lit(c.eps);
                    let bc1 = T::one() - b1.powi(t);
                    let bc2 = T::one() - b2.powi(t);
                    let (m, v) = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
                    if m.shape() != param.shape() {
                        return Err(Error::shape(
                            "optimizer_step",
                            format!("{name}: moments {:?}, param {:?}", m.shape(), param.shape()),
                        ));
                    }
                    let it = param
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
                    for ((p, &g), (mi, vi)) in it {
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *p -= lr * wd * *p;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
