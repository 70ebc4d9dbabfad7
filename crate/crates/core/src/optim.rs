//! Adam with plateau-driven learning-rate decay bookkeeping.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NamedTensors = IndexMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    /// Current learning rate; starts at `config.learning_rate` and only decays.
    pub lr: f64,
    pub step: u64,
    pub first_moment: NamedTensors,
    pub second_moment: NamedTensors,
    /// Best validation metric seen so far (`-inf` before the first evaluation).
    pub best_metric: f64,
    /// Iterations since the last improvement or decay; drives the patience rule.
    pub since_improvement: u64,
    /// Iterations since the best metric; drives early stopping.
    pub since_best: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &NamedTensors) -> OptimizerState {
        let zeros: NamedTensors = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        OptimizerState {
            config,
            lr: config.learning_rate,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            best_metric: f64::NEG_INFINITY,
            since_improvement: 0,
            since_best: 0,
        }
    }

    /// One Adam update of every tensor in `params`.
    pub fn adam_step(&mut self, params: &mut NamedTensors, grads: &NamedTensors) -> Result<()> {
        for name in params.keys() {
            if !grads.contains_key(name) {
                return Err(Error::Contract(format!("no gradient for parameter {name:?}")));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        let lr = self.lr;
        for (name, param) in params.iter_mut() {
            let grad = &grads[name];
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {name:?} has shape {:?}, parameter {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * g;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Folds a validation result into the plateau bookkeeping.
    ///
    /// `elapsed` is the number of iterations since the previous evaluation.
    /// Returns `true` when the learning rate was decayed.
    pub fn observe_metric(&mut self, metric: f64, elapsed: u64, patience: u64, decay: f64) -> bool {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.since_improvement = 0;
            self.since_best = 0;
            return false;
        }
        self.since_improvement += elapsed;
        self.since_best += elapsed;
        if self.since_improvement >= patience {
            self.lr *= decay;
            self.since_improvement = 0;
            return true;
        }
        false
    }
}
