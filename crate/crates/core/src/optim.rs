//! Adam with per-parameter step counts and the linear step-size decay schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs at the end of the run over which the step size falls linearly;
    /// `None` means the second half of the run.
    pub decay_epochs: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            decay_epochs: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("optimizer needs lr > 0 and betas in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("optimizer eps must be positive"));
        }
        Ok(())
    }

    /// Step size for 1-based `epoch` out of `total`. Constant until the decay
    /// window, then `lr * (total - epoch + 1) / (decay + 1)`.
    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        let decay = self.decay_epochs.unwrap_or(total / 2).min(total);
        let start = total - decay;
        if epoch <= start {
            self.lr
        } else {
            self.lr * (total + 1 - epoch.min(total)) as f64 / (decay + 1) as f64
        }
    }
}

/// Adam moments for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied to each parameter; parameters without a gradient are
    /// skipped entirely, so bias correction stays per parameter.
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.len()],
        }
    }

    /// Apply one update. `grads[i]` is `None` for parameters outside the graph.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Option<Tensor>],
        cfg: &OptimizerConfig,
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (i, (p, grad)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if grad.shape() != p.shape() {
                return Err(Error::shape("gradient shape differs from parameter"));
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
