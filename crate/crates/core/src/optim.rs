//! SGD with momentum and Adam.

use serde::{Deserialize, Serialize};

use crate::model::Parameter;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(TensorError::Invalid {
                op: "optimizer",
                reason: reason.into(),
            })
        };
        if self.lr.is_nan() || self.lr < 0.0 {
            return bad("learning rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        Ok(())
    }
}

/// Per-parameter state, allocated lazily on the first step.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar> {
    pub config: OptimizerConfig,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter from its gradient, then clears the
    /// gradients. A trainable parameter without a gradient is an error and
    /// leaves all parameters untouched.
    pub fn step(&mut self, params: &mut [Parameter<T>]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(TensorError::Invalid {
                op: "optimizer_step",
                reason: format!("parameter `{}` has no gradient", p.name),
            });
        }
        if self.first.len() != params.len() {
            self.first = vec![None; params.len()];
            self.second = vec![None; params.len()];
        }
        self.step += 1;
        let cfg = self.config;
        let lr = T::lit(cfg.lr);
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad.take() else { continue };
            if !p.trainable {
                continue;
            }
            match cfg.kind {
                OptimizerKind::Sgd if cfg.momentum == 0.0 => {
                    for (w, &gv) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gv;
                    }
                }
                OptimizerKind::Sgd => {
                    let mu = T::lit(cfg.momentum);
                    let v = self.first[k].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    for ((w, vel), &gv) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vel = mu * *vel + gv;
                        *w -= lr * *vel;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
                    let c1 = T::one() - T::lit(cfg.beta1.powi(self.step.min(i32::MAX as u64) as i32));
                    let c2 = T::one() - T::lit(cfg.beta2.powi(self.step.min(i32::MAX as u64) as i32));
                    let eps = T::lit(cfg.eps);
                    let m = self.first[k].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.second[k].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    for (((w, mk), vk), &gv) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mk = b1 * *mk + (T::one() - b1) * gv;
                        *vk = b2 * *vk + (T::one() - b2) * gv * gv;
                        let m_hat = *mk / c1;
                        let v_hat = *vk / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
