//! First-order optimizers over [`Parameterized`] models.

use super::config::OptimizerKind;
use crate::models::Parameterized;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    /// SGD velocity or Adam first moment, one buffer per tensor.
    m: Vec<Vec<f64>>,
    /// Adam second moment.
    v: Vec<Vec<f64>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd, momentum, weight_decay)
    }

    pub fn adam(weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Adam, 0.0, weight_decay)
    }

    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            momentum,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// One update of `params` from `grads`, which must have the same layout.
    /// Weight decay is added to the gradient (L2 regularization).
    pub fn step(&mut self, params: &mut dyn Parameterized, grads: &dyn Parameterized, lr: f64) {
        let gs = grads.named_params();
        let mut ps = params.named_params_mut();
        assert_eq!(gs.len(), ps.len(), "gradient layout differs from parameters");
        if self.m.is_empty() {
            self.m = ps.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            if self.kind == OptimizerKind::Adam {
                self.v = self.m.clone();
            }
        }
        self.t += 1;
        let (bc1, bc2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
        for (i, ((_, p), (_, g))) in ps.iter_mut().zip(&gs).enumerate() {
            let m = &mut self.m[i];
            match self.kind {
                OptimizerKind::Sgd => {
                    for j in 0..p.len() {
                        let d = g[j] + self.weight_decay * p[j];
                        if self.momentum == 0.0 {
                            p[j] -= lr * d;
                        } else {
                            m[j] = self.momentum * m[j] + d;
                            p[j] -= lr * m[j];
                        }
                    }
                }
                OptimizerKind::Adam => {
                    let v = &mut self.v[i];
                    for j in 0..p.len() {
                        let d = g[j] + self.weight_decay * p[j];
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * d;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * d * d;
                        p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}
