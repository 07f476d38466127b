//! Cyclical self-supervision for semi-supervised segmentation of cyclical
//! video, and teacher-student distillation for video regression.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`).
//! Training uses `f32`; gradient checks use `f64`. The aliases below name the
//! training precision.

pub mod checkpoint;
pub mod css;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod regression;
pub mod rng;
pub mod scalar;
pub mod segmentation;
pub mod tensor;

pub use error::{Error, Result};

/// Element type used for training and inference.
pub type Real = f32;

pub type Embeddings = css::EmbeddingSequence<Real>;
pub type SegModel = segmentation::SegmentationModel<Real>;
pub type RegModel = regression::RegressionModel<Real>;
pub type Params = nn::ParamStore<Real>;
