use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Parameterized, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
    /// Iterations at which the learning rate is multiplied by `lr_decay`.
    #[serde(default)]
    pub lr_steps: Vec<usize>,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
}

fn default_batch() -> usize {
    16
}

fn default_momentum() -> f64 {
    0.9
}

fn default_decay() -> f64 {
    0.1
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            batch_size: default_batch(),
            iterations: 1000,
            momentum: default_momentum(),
            seed: 0,
            lr_steps: Vec::new(),
            lr_decay: default_decay(),
        }
    }
}

impl SgdConfig {
    pub fn violations(&self, section: &str) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("{section}.learning_rate must be > 0 (got {})", self.learning_rate));
        }
        if self.batch_size == 0 {
            v.push(format!("{section}.batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("{section}.momentum must be in [0, 1) (got {})", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            v.push(format!("{section}.lr_decay must be in (0, 1] (got {})", self.lr_decay));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("sgd");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Step-decayed learning rate for a 0-based iteration.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&s| iteration >= s).count();
        self.learning_rate * self.lr_decay.powi(drops as i32)
    }
}

/// SGD with classical momentum: `v <- m v + g; p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn step<T: Scalar, M: Parameterized<T> + ?Sized>(
        &mut self,
        model: &mut M,
        iteration: usize,
    ) -> Result<()> {
        let lr = self.config.learning_rate_at(iteration);
        let momentum = self.config.momentum;
        let mut missing = None;
        let velocity = &mut self.velocity;
        model.visit_params_mut("", &mut |name, p| {
            if missing.is_some() {
                return;
            }
            let n = p.len();
            if p.grad().is_none() {
                missing = Some(name);
                return;
            }
            let v = velocity.entry(name).or_insert_with(|| vec![0.0; n]);
            let (values, grad) = p.data_and_grad_mut();
            for ((w, g), vel) in values.iter_mut().zip(grad.iter()).zip(v.iter_mut()) {
                *vel = momentum * *vel + g.f64();
                *w = T::of(w.f64() - lr * *vel);
            }
        });
        match missing {
            Some(name) => Err(Error::MissingGrad(name)),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Tensor};

    /// Single scalar parameter wrapped as a 1x1 linear weight.
    fn scalar_param(p0: f64) -> Linear<f64> {
        Linear::from_params(
            Tensor::new(vec![1, 1], vec![p0]).unwrap(),
            Tensor::zeros(&[1]),
        )
        .unwrap()
    }

    fn steps_to_converge(lr: f64, momentum: f64, max_steps: usize) -> (usize, f64) {
        let mut layer = scalar_param(0.0);
        let mut sgd = Sgd::new(SgdConfig {
            learning_rate: lr,
            momentum,
            ..SgdConfig::default()
        })
        .unwrap();
        for step in 0..max_steps {
            let p = layer.weight().data()[0];
            if (p - 3.0).abs() < 1e-3 {
                return (step, p);
            }
            layer.zero_grad();
            layer.weight_mut().require_grad()[0] = 2.0 * (p - 3.0);
            sgd.step(&mut layer, step).unwrap();
        }
        (max_steps, layer.weight().data()[0])
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut layer = Linear::<f32>::new(3, 2, 5).unwrap();
        let before = layer.weight().clone();
        layer.zero_grad();
        let mut sgd = Sgd::new(SgdConfig::default()).unwrap();
        sgd.step(&mut layer, 0).unwrap();
        assert_eq!(layer.weight().data(), before.data());
    }

    #[test]
    fn quadratic_converges_without_momentum() {
        let mut layer = scalar_param(0.0);
        let mut sgd = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            ..SgdConfig::default()
        })
        .unwrap();
        for step in 0..100 {
            let p = layer.weight().data()[0];
            layer.zero_grad();
            layer.weight_mut().require_grad()[0] = 2.0 * (p - 3.0);
            sgd.step(&mut layer, step).unwrap();
        }
        // error contracts by 0.8 per step: 3 * 0.8^100 ~ 6e-10
        assert!((layer.weight().data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn momentum_reaches_tolerance_in_fewer_steps() {
        let (plain, p_plain) = steps_to_converge(0.01, 0.0, 10_000);
        let (heavy, p_heavy) = steps_to_converge(0.01, 0.9, 10_000);
        assert!((p_plain - 3.0).abs() < 1e-3 && (p_heavy - 3.0).abs() < 1e-3);
        assert!(heavy < plain, "momentum {heavy} steps vs plain {plain}");
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut layer = Linear::<f32>::new(2, 2, 0).unwrap();
        layer.weight_mut().clear_grad();
        let mut sgd = Sgd::new(SgdConfig::default()).unwrap();
        assert!(matches!(sgd.step(&mut layer, 0), Err(Error::MissingGrad(n)) if n == "weight"));
    }

    #[test]
    fn invalid_config_lists_every_violation() {
        let cfg = SgdConfig {
            learning_rate: 0.0,
            batch_size: 0,
            momentum: 1.0,
            ..SgdConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = SgdConfig {
            learning_rate: 1.0,
            lr_steps: vec![10, 20],
            lr_decay: 0.5,
            ..SgdConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(9), 1.0);
        assert_eq!(cfg.learning_rate_at(10), 0.5);
        assert_eq!(cfg.learning_rate_at(25), 0.25);
    }
}
