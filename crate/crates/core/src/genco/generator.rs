use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numcore::{Bound, Graph, ParamStore, SeedKey, Tensor, Var};

pub const GENERATOR_PREFIX: &str = "generator.";

/// Gaussian noise fed to the generator alongside each feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub dim: usize,
    pub mean: f64,
    pub variance: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            dim: 128,
            mean: 0.0,
            variance: 0.1,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.variance >= 0.0 && self.variance.is_finite()) {
            return Err(Error::config(format!("{path}.variance"), "must be finite and non-negative"));
        }
        if !self.mean.is_finite() {
            return Err(Error::config(format!("{path}.mean"), "must be finite"));
        }
        Ok(())
    }
}

/// `[batch, spec.dim]` of i.i.d. normal draws, fully determined by `key`.
pub fn sample_noise(spec: &NoiseSpec, batch: usize, key: SeedKey) -> Tensor {
    let normal = Normal::new(spec.mean, spec.variance.sqrt()).expect("validated variance");
    let mut rng = key.rng();
    Tensor::from_fn([batch, spec.dim], |_| normal.sample(&mut rng))
}

/// Three linear layers with a ReLU between successive layers, mapping the
/// concatenation `[q, z]` to a feature of `q`'s dimension.
#[derive(Debug, Clone)]
pub struct Generator {
    pub feature_dim: usize,
    pub noise_dim: usize,
    layers: [Linear; 3],
}

impl Generator {
    fn names() -> [String; 3] {
        [1, 2, 3].map(|i| format!("{GENERATOR_PREFIX}fc{i}"))
    }

    pub fn register(store: &mut ParamStore, feature_dim: usize, noise_dim: usize, key: SeedKey) -> Result<Self> {
        let d = feature_dim + noise_dim;
        let [a, b, c] = Self::names();
        Ok(Generator {
            feature_dim,
            noise_dim,
            layers: [
                Linear::register(store, &a, d, d, key)?,
                Linear::register(store, &b, d, d, key)?,
                Linear::register(store, &c, d, feature_dim, key)?,
            ],
        })
    }

    pub fn attach(store: &ParamStore, feature_dim: usize, noise_dim: usize) -> Result<Self> {
        let d = feature_dim + noise_dim;
        let [a, b, c] = Self::names();
        Ok(Generator {
            feature_dim,
            noise_dim,
            layers: [
                Linear::attach(store, &a, d, d)?,
                Linear::attach(store, &b, d, d)?,
                Linear::attach(store, &c, d, feature_dim)?,
            ],
        })
    }

    pub fn layers(&self) -> &[Linear; 3] {
        &self.layers
    }

    /// Raw generator output before normalization.
    pub fn forward_raw(&self, g: &mut Graph, p: &Bound, q: Var, z: Var) -> Result<Var> {
        let (sq, sz) = (g.shape(q).to_vec(), g.shape(z).to_vec());
        if sq.len() != 2 || sq[1] != self.feature_dim || sz.len() != 2 || sz[1] != self.noise_dim || sz[0] != sq[0] {
            return Err(Error::ShapeMismatch {
                op: "generate",
                lhs: sq,
                rhs: sz,
            });
        }
        let x = g.concat(&[q, z], 1)?;
        let h = self.layers[0].forward(g, p, x)?;
        let h = g.relu(h);
        let h = self.layers[1].forward(g, p, h)?;
        let h = g.relu(h);
        self.layers[2].forward(g, p, h)
    }

    /// `q′ = normalize(G([q, z]))`.
    pub fn generate(&self, g: &mut Graph, p: &Bound, q: Var, z: Var) -> Result<Var> {
        let raw = self.forward_raw(g, p, q, z)?;
        g.l2_normalize(raw).map_err(|e| match e {
            Error::DegenerateNorm { row, .. } => Error::DegenerateNorm { op: "generate", row },
            other => other,
        })
    }
}
