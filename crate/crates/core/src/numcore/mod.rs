//! Differentiable numeric substrate: tensors, the operator tape, optimizers,
//! checkpoints and the finite-difference oracle.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::grad_check;
pub use graph::{BnStats, Gradients, Graph, Var};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Bound, ParamGrads, ParamId, ParamStore, Parameter};
pub use rng::SeedKey;
pub use tensor::{Precision, Tensor};
