use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, Parameter};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPSILON: f32 = 1e-8;

/// First-order optimizer with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    step: i32,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Optimizer {
            kind,
            lr,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn adam(lr: f32) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    /// Applies one update to every unfrozen parameter, then zeroes all
    /// gradients.
    pub fn update_step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step);
        let bc2 = 1.0 - BETA2.powi(self.step);
        for p in params {
            if !p.frozen {
                match self.kind {
                    OptimizerKind::Sgd => {
                        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                            *v -= self.lr * g;
                        }
                    }
                    OptimizerKind::Adam => {
                        let (m, s) = self.moments.entry(p.id()).or_insert_with(|| {
                            (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape()))
                        });
                        let values = p.value.data_mut();
                        let grads = p.grad.data();
                        for i in 0..values.len() {
                            let g = grads[i];
                            let mi = &mut m.data_mut()[i];
                            *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                            let mhat = *mi / bc1;
                            let si = &mut s.data_mut()[i];
                            *si = BETA2 * *si + (1.0 - BETA2) * g * g;
                            let shat = *si / bc2;
                            values[i] -= self.lr * mhat / (shat.sqrt() + EPSILON);
                        }
                    }
                }
            }
            p.zero_grad();
        }
    }
}
