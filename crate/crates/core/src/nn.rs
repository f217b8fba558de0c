//! Parameterized building blocks shared by the encoder, generator and heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::{Bound, Graph, ParamId, ParamStore, Precision, SeedKey, Tensor, Var};

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are updated afterwards.
    Train,
    /// Running statistics.
    Eval,
}

/// Pending running-statistics update from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], precision: Precision) {
    for u in updates {
        for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
            let run = store.value_mut(id).data_mut();
            for (r, b) in run.iter_mut().zip(batch) {
                *r = precision.round((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
            }
        }
    }
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::StructureMismatch {
        path: name.to_string(),
        reason: "parameter not found".into(),
    })
}

fn expect_shape(store: &ParamStore, id: ParamId, shape: &[usize]) -> Result<ParamId> {
    let p = store.get(id);
    if p.value.shape() != shape {
        return Err(Error::StructureMismatch {
            path: p.name.clone(),
            reason: format!("shape {:?}, expected {:?}", p.value.shape(), shape),
        });
    }
    Ok(id)
}

/// Fully connected layer with weight `[out, in]` and bias `[out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers a layer with `U(-1/√in, 1/√in)` initialization.
    pub fn register(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, key: SeedKey) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut rng = key.derive(name).derive("weight").rng();
        let w = Tensor::from_fn([out_dim, in_dim], |_| rng.gen_range(-bound..bound));
        let mut rng = key.derive(name).derive("bias").rng();
        let b = Tensor::from_fn([out_dim], |_| rng.gen_range(-bound..bound));
        Ok(Linear {
            weight: store.add(format!("{name}.weight"), w, true)?,
            bias: store.add(format!("{name}.bias"), b, true)?,
            in_dim,
            out_dim,
        })
    }

    pub fn attach(store: &ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Linear {
            weight: expect_shape(store, lookup(store, &format!("{name}.weight"))?, &[out_dim, in_dim])?,
            bias: expect_shape(store, lookup(store, &format!("{name}.bias"))?, &[out_dim])?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), p.var(self.bias))
    }

    pub fn count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// Convolution without bias, followed by batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stride: usize,
    pub kernel: usize,
}

impl ConvBnRelu {
    /// Registers a block with He-normal convolution weights.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        key: SeedKey,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut rng = key.derive(name).derive("conv").rng();
        let w = Tensor::from_fn([out_ch, in_ch, kernel, kernel], |_| normal.sample(&mut rng));
        Ok(ConvBnRelu {
            weight: store.add(format!("{name}.conv.weight"), w, true)?,
            gamma: store.add(format!("{name}.bn.weight"), Tensor::full([out_ch], 1.0), true)?,
            beta: store.add(format!("{name}.bn.bias"), Tensor::zeros([out_ch]), true)?,
            running_mean: store.add(format!("{name}.bn.running_mean"), Tensor::zeros([out_ch]), false)?,
            running_var: store.add(format!("{name}.bn.running_var"), Tensor::full([out_ch], 1.0), false)?,
            stride,
            kernel,
        })
    }

    pub fn attach(store: &ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(ConvBnRelu {
            weight: expect_shape(store, lookup(store, &format!("{name}.conv.weight"))?, &[out_ch, in_ch, kernel, kernel])?,
            gamma: expect_shape(store, lookup(store, &format!("{name}.bn.weight"))?, &[out_ch])?,
            beta: expect_shape(store, lookup(store, &format!("{name}.bn.bias"))?, &[out_ch])?,
            running_mean: expect_shape(store, lookup(store, &format!("{name}.bn.running_mean"))?, &[out_ch])?,
            running_var: expect_shape(store, lookup(store, &format!("{name}.bn.running_var"))?, &[out_ch])?,
            stride,
            kernel,
        })
    }

    /// Output of the convolution alone.
    pub fn conv(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), self.stride, self.kernel / 2)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mode: Mode, updates: &mut Vec<BnUpdate>) -> Result<Var> {
        let y = self.conv(g, p, x)?;
        let (y, stats) = match mode {
            Mode::Train => g.batch_norm(y, p.var(self.gamma), p.var(self.beta), None)?,
            Mode::Eval => {
                let rm = g.value(p.var(self.running_mean)).data().to_vec();
                let rv = g.value(p.var(self.running_var)).data().to_vec();
                g.batch_norm(y, p.var(self.gamma), p.var(self.beta), Some((&rm, &rv)))?
            }
        };
        if let Some(s) = stats {
            updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: s.mean,
                batch_var: s.var,
            });
        }
        Ok(g.relu(y))
    }
}
