//! Minimal differentiable building blocks for the segmentation and regression models.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;

pub use graph::{Gradients, Graph, PoolMode, Var};
pub use kernels::Conv2dSpec;
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{ParamGrads, ParamId, ParamStore};
