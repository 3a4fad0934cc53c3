//! First-order parameter updates with optional global-norm clipping.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        clip: Option<f64>,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        clip: Option<f64>,
    },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, clip: Option<f64>) -> Self {
        OptimizerConfig::Sgd { lr, clip }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let (lr, clip) = match self {
            OptimizerConfig::Sgd { lr, clip } => (*lr, *clip),
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                clip,
            } => {
                if !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) || !(*eps > 0.0) {
                    return Err("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
                }
                (*lr, *clip)
            }
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err("learning rate must be positive".into());
        }
        if clip.is_some_and(|c| !(c > 0.0)) {
            return Err("clip must be positive".into());
        }
        Ok(())
    }

    pub fn build(&self, n_params: usize) -> Optimizer {
        Optimizer {
            config: *self,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            steps: 0,
        }
    }
}

/// Optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Scales `grad` in place so its norm is at most `clip`; returns the original norm.
pub fn clip_grad(grad: &mut [f64], clip: Option<f64>) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if let Some(c) = clip {
        if norm > c {
            let k = c / norm;
            grad.iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

impl Optimizer {
    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update with learning-rate multiplier `lr_scale`; returns the pre-clip gradient norm.
    pub fn step_scaled(&mut self, params: &mut [f64], grad: &[f64], lr_scale: f64) -> f64 {
        let mut g = grad.to_vec();
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, clip } => {
                let norm = clip_grad(&mut g, clip);
                for (p, gi) in params.iter_mut().zip(&g) {
                    *p -= lr * lr_scale * gi;
                }
                norm
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                clip,
            } => {
                let norm = clip_grad(&mut g, clip);
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for (((p, gi), m), v) in params.iter_mut().zip(&g).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * gi;
                    *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                    *p -= lr * lr_scale * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
                norm
            }
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> f64 {
        self.step_scaled(params, grad, 1.0)
    }
}
