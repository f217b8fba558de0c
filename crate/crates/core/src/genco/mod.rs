//! The contrastive objectives and the pieces they consume.

pub mod bank;
pub mod generator;
pub mod loss;
pub mod momentum;

pub use bank::MemoryBank;
pub use generator::{sample_noise, Generator, NoiseSpec, GENERATOR_PREFIX};
pub use loss::{contrastive_loss, genco_loss, loss_from_similarities, moco_loss, LossOptions};
pub use momentum::{check_isomorphic, momentum_update, offline_copy};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Objective, bank and generator hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GencoConfig {
    pub tau: f64,
    /// Momentum `m` of the offline encoder average.
    pub momentum: f64,
    pub bank_capacity: usize,
    pub noise: NoiseSpec,
    pub symmetric_negatives: bool,
}

impl Default for GencoConfig {
    fn default() -> Self {
        GencoConfig {
            tau: 0.2,
            momentum: 0.99,
            bank_capacity: 512,
            noise: NoiseSpec::default(),
            symmetric_negatives: true,
        }
    }
}

impl GencoConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("{path}.tau"), "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config(format!("{path}.momentum"), "must lie in [0, 1]"));
        }
        if self.bank_capacity == 0 {
            return Err(Error::config(format!("{path}.bank_capacity"), "must be positive"));
        }
        if self.noise.dim == 0 {
            return Err(Error::config(format!("{path}.noise.dim"), "must be positive"));
        }
        self.noise.validate(&format!("{path}.noise"))
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            tau: self.tau,
            symmetric_negatives: self.symmetric_negatives,
        }
    }
}
