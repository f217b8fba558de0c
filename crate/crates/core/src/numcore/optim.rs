use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum {
        #[serde(default = "default_sgd_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    AdamW {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_sgd_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

/// First-order optimizer over a fixed set of registered parameters.
///
/// Weight decay is an L2 term added to the gradient for SGD and Adam, and
/// decoupled (applied directly to the weights) for AdamW.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    params: Vec<ParamId>,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, params: Vec<ParamId>) -> Self {
        let n = params.len();
        Optimizer {
            kind,
            lr,
            weight_decay,
            params,
            first: vec![None; n],
            second: vec![None; n],
            steps: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, precision: Precision) -> Result<()> {
        for &id in &self.params {
            let p = store.get(id);
            match grads.get(id) {
                None => {
                    return Err(Error::MissingGradient { name: p.name.clone() });
                }
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(Error::ShapeMismatch {
                        op: "optimizer_step",
                        lhs: p.value.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                Some(_) => {}
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (lr, wd) = (self.lr, self.weight_decay);
        for (slot, &id) in self.params.iter().enumerate() {
            let grad = grads.get(id).expect("checked above").data();
            let param = store.value_mut(id).data_mut();
            let n = param.len();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let fresh = self.first[slot].is_none();
                    let buf = self.first[slot].get_or_insert_with(|| vec![0.0; n]);
                    for i in 0..n {
                        let g = grad[i] + wd * param[i];
                        buf[i] = if fresh { g } else { momentum * buf[i] + g };
                        param[i] -= lr * buf[i];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } | OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let decoupled = matches!(self.kind, OptimizerKind::AdamW { .. });
                    let m = self.first[slot].get_or_insert_with(|| vec![0.0; n]);
                    let v = self.second[slot].get_or_insert_with(|| vec![0.0; n]);
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for i in 0..n {
                        let g = if decoupled {
                            param[i] -= lr * wd * param[i];
                            grad[i]
                        } else {
                            grad[i] + wd * param[i]
                        };
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        param[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                    precision.round_slice(m);
                    precision.round_slice(v);
                }
            }
            if let Some(buf) = self.first[slot].as_mut() {
                precision.round_slice(buf);
            }
            precision.round_slice(param);
        }
        Ok(())
    }

    /// Moment buffers keyed by `"<m|v>.<param name>"`, plus the step count.
    pub fn state_tensors(&self, store: &ParamStore) -> (u64, Vec<(String, Tensor)>) {
        let mut out = Vec::new();
        for (slot, &id) in self.params.iter().enumerate() {
            let p = store.get(id);
            for (tag, buf) in [("m", &self.first[slot]), ("v", &self.second[slot])] {
                if let Some(b) = buf {
                    out.push((
                        format!("{tag}.{}", p.name),
                        Tensor::new(p.value.shape().to_vec(), b.clone()).expect("moment shape"),
                    ));
                }
            }
        }
        (self.steps, out)
    }

    pub fn load_state(&mut self, store: &ParamStore, steps: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.steps = steps;
        for (slot, &id) in self.params.iter().enumerate() {
            let p = store.get(id);
            for (tag, buf) in [("m", &mut self.first[slot]), ("v", &mut self.second[slot])] {
                *buf = match tensors.get(&format!("{tag}.{}", p.name)) {
                    Some(t) if t.shape() == p.value.shape() => Some(t.data().to_vec()),
                    Some(t) => {
                        return Err(Error::StructureMismatch {
                            path: format!("{tag}.{}", p.name),
                            reason: format!("moment shape {:?}", t.shape()),
                        })
                    }
                    None => None,
                };
            }
        }
        Ok(())
    }
}
