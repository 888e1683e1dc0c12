//! Decoupled-weight-decay Adam. Moments are kept in f64 regardless of the
//! training precision; weight decay multiplies parameters directly and
//! never enters the moments.

use crate::error::{Error, Result};
use crate::model::Param;
use crate::tensor::Element;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup steps before the peak rate.
    pub warmup_steps: u64,
    /// When nonzero, linearly decay the rate to 0 at this step; the harness
    /// default is 0 (constant after warmup).
    pub decay_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 100,
            decay_steps: 0,
        }
    }
}

impl AdamWConfig {
    /// The rate schedule: linear warmup to the peak, then constant, or a
    /// linear decay to zero when `decay_steps` is set.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.decay_steps > 0 {
            let frac = 1.0 - step as f64 / self.decay_steps as f64;
            return self.lr * frac.max(0.0);
        }
        self.lr
    }
}

/// First/second moment buffers per parameter plus the shared step count.
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(param_sizes: &[usize]) -> Self {
        OptimizerState {
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over every parameter, reading the accumulated leaf
    /// gradients. Gradients must be finite; a non-finite one aborts the
    /// step with a diagnostic naming the parameter.
    pub fn adamw_step<E: Element>(
        &mut self,
        params: &mut [&mut Param<E>],
        cfg: &AdamWConfig,
    ) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "optimizer state shape mismatch");
        self.step += 1;
        let t = self.step;
        let lr = cfg.lr_at(t - 1);
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for (pi, param) in params.iter_mut().enumerate() {
            let grad = param.tensor.grad().expect("trainable parameter has a gradient buffer");
            for (ci, g) in grad.iter().enumerate() {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of {}[{ci}] at optimizer step {t}",
                        param.name
                    )));
                }
            }
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let decay = if param.decay { cfg.weight_decay } else { 0.0 };
            let data = param.tensor.data_make_mut();
            for i in 0..data.len() {
                let g = grad[i].to_f64();
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut p = data[i].to_f64();
                p -= lr * mhat / (vhat.sqrt() + cfg.eps);
                p -= lr * decay * p;
                data[i] = E::from_f64(p);
            }
        }
        Ok(())
    }
}
