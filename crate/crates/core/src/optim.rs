//! Adam and momentum-SGD with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer kind: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

struct Slot<S> {
    m: Vec<S>,
    v: Vec<S>,
}

/// Optimizer state over one parameter set. Moment buffers are allocated
/// lazily on the first step and are indexed by registry position.
pub struct Optimizer<S: Scalar> {
    config: OptimizerConfig,
    step_count: u64,
    slots: Vec<Slot<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            step_count: 0,
            slots: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every parameter in the set. Every parameter must
    /// carry a populated gradient.
    pub fn step(&mut self, params: &ParamSet<S>) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|(_, t)| Slot {
                    m: vec![S::zero(); t.len()],
                    v: vec![S::zero(); t.len()],
                })
                .collect();
        }
        self.step_count += 1;
        let lr = S::from_f64(self.config.learning_rate);
        let wd = S::from_f64(self.config.weight_decay);
        let one = S::one();
        for (idx, (name, t)) in params.iter().enumerate() {
            let grad = t
                .grad()
                .ok_or_else(|| Error::Usage(format!("missing gradient for parameter {name}")))?;
            let slot = &mut self.slots[idx];
            match self.config.kind {
                OptimizerKind::Adam => {
                    let b1 = S::from_f64(self.config.beta1);
                    let b2 = S::from_f64(self.config.beta2);
                    let eps = S::from_f64(self.config.epsilon);
                    let t_f = S::from_f64(self.step_count as f64);
                    let corr1 = one - b1.powf(t_f);
                    let corr2 = one - b2.powf(t_f);
                    for (i, &g) in grad.iter().enumerate() {
                        slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
                        slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
                        let m_hat = slot.m[i] / corr1;
                        let v_hat = slot.v[i] / corr2;
                        t.nudge(i, -lr * m_hat / (v_hat.sqrt() + eps));
                    }
                }
                OptimizerKind::Sgd => {
                    let mu = S::from_f64(self.config.momentum);
                    for (i, &g) in grad.iter().enumerate() {
                        slot.m[i] = mu * slot.m[i] + g;
                        t.nudge(i, -lr * slot.m[i]);
                    }
                }
            }
            if self.config.weight_decay > 0.0 {
                let data = t.data();
                for (i, &w) in data.iter().enumerate() {
                    t.nudge(i, -lr * wd * w);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;

    fn single_param(value: f64) -> (ParamSet<f64>, Tensor<f64>) {
        let t = Tensor::param(1, 1, vec![value]).unwrap();
        let mut ps = ParamSet::new();
        ps.push("w", t.clone());
        (ps, t)
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let (ps, t) = single_param(1.5);
        let mut opt = Optimizer::new(OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        })
        .unwrap();
        // forward: loss = 0 * w → zero gradient
        let loss = t.scale(0.0).sum_all();
        loss.backward().unwrap();
        opt.step(&ps).unwrap();
        assert_eq!(t.data(), vec![1.5]);
    }

    #[test]
    fn sgd_plain_step() {
        let (ps, t) = single_param(0.0);
        let mut opt = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        })
        .unwrap();
        t.sum_all().backward().unwrap(); // grad = 1
        opt.step(&ps).unwrap();
        assert_relative_eq!(t.data()[0], -0.1, epsilon = 1e-15);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let (ps, t) = single_param(0.0);
        let mut opt = Optimizer::new(OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        })
        .unwrap();
        t.sum_all().backward().unwrap();
        opt.step(&ps).unwrap();
        // bias correction makes m̂/√v̂ ≈ 1 on the first step
        assert_relative_eq!(t.data()[0], -0.1, epsilon = 1e-6);
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let (ps, _t) = single_param(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        assert!(matches!(opt.step(&ps), Err(Error::Usage(_))));
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let (ps, t) = single_param(1.0);
        let mut opt = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        })
        .unwrap();
        let loss = t.scale(0.0).sum_all();
        loss.backward().unwrap();
        opt.step(&ps).unwrap();
        // pure decay: w ← w − lr·wd·w = 1 − 0.05
        assert_relative_eq!(t.data()[0], 0.95, epsilon = 1e-12);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(Optimizer::<f64>::new(OptimizerConfig {
            beta1: 1.0,
            ..OptimizerConfig::default()
        })
        .is_err());
    }
}
