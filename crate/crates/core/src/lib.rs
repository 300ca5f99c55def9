//! Concept extraction for convolutional image classifiers.
//!
//! Pixel descriptors are built by stacking upscaled layer activations,
//! clustered with streaming minibatch k-means into concepts, localized as
//! per-image masks, and scored with one input-gradient evaluation per image.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the `f32` flavour used by files, the runner protocol
//! and the pipeline.

pub mod clustering;
pub mod concepts;
mod error;
pub mod importance;
pub mod lad;
pub mod ltns;
pub mod modelrt;
pub mod pipeline;
mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{squared_distance, Scalar};

pub type Tensor = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type CentroidSet = clustering::CentroidSet<f32>;
pub type CentroidSet64 = clustering::CentroidSet<f64>;
pub type DescriptorBatch = clustering::DescriptorBatch<f32>;
pub type DescriptorBatch64 = clustering::DescriptorBatch<f64>;
pub type DescriptorField = lad::DescriptorField<f32>;
pub type ActivationSet = lad::ActivationSet<f32>;
pub type ConceptMask = concepts::ConceptMask<f32>;
pub type ConceptModel = concepts::ConceptModel<f32>;
pub type Standardization = lad::Standardization<f32>;
pub type ToyModel = modelrt::ToyModel<f32>;
pub type ToyModel64 = modelrt::ToyModel<f64>;
