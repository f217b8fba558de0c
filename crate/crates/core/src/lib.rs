//! Generator-augmented momentum contrast (GenCo) pretraining and few-shot
//! fine-tuning, at desk scale.
//!
//! Stage 1 ([`pretrain`]) trains a convolutional encoder with a momentum
//! contrast objective in which a small generator network produces an extra
//! positive feature for every query. Stage 2 ([`fewshot`]) freezes the
//! encoder and reuses the generator to double the labelled support set in
//! feature space while fitting a linear classifier or a segmentation decoder.

pub mod dataio;
pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod genco;
pub mod nn;
pub mod numcore;
pub mod oracle;
pub mod pretrain;
pub mod run;

pub use error::{Error, Result};
