//! Model-runner boundary: everything that evaluates a model goes through
//! [`ModelRunner`], and [`AuditedRunner`] counts every evaluation per image.

mod protocol;
mod subprocess;
mod toy;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ltns::LtnsError;
use crate::tensor::Tensor;

pub use protocol::{serve, EchoRunner, Handshake, Reply, Request, RequestKind, PROTOCOL};
pub use subprocess::{SubprocessOptions, SubprocessRunner, RUNNER_CMD_ENV};
pub use toy::{ToyForward, ToyModel, ToyRunner, TOY_LAYERS};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("unknown layer {layer:?}; runner provides {known:?}")]
    UnknownLayer { layer: String, known: Vec<String> },
    #[error("runner did not complete the handshake within {0:?}")]
    HandshakeTimeout(std::time::Duration),
    #[error("runner speaks protocol {got:?}, expected {expected:?}")]
    VersionMismatch { got: String, expected: String },
    #[error("malformed runner reply: {0}")]
    MalformedReply(String),
    #[error("runner exited ({status}); stderr:\n{stderr}")]
    Exited { status: String, stderr: String },
    #[error("failed to start runner {cmd:?}: {source}")]
    Spawn {
        cmd: String,
        #[source]
        source: std::io::Error,
    },
    #[error("runner reported an error: {message}; stderr:\n{stderr}")]
    Remote { message: String, stderr: String },
    #[error("runner i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("runner tensor file {path}: {source}")]
    Tensor {
        path: PathBuf,
        #[source]
        source: LtnsError,
    },
    #[error("invalid runner input: {0}")]
    InvalidInput(String),
    #[error("runner incompatible with dataset: {0}")]
    Incompatible(String),
    #[error("no runner configured: pass --runner, --toy-model, or set CONCEPT_RUNNER_CMD")]
    NotConfigured,
}

/// Declared input normalization of a runner, recorded in reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNormalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// What a runner advertises at startup.
#[derive(Clone, Debug, PartialEq)]
pub struct RunnerInfo {
    pub layers: Vec<String>,
    pub n_k: usize,
    pub input_normalization: Option<InputNormalization>,
}

/// Result of one `grad_g` evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum GradOutcome {
    /// `g(f(x)) > 0` and the input gradient of `g(f(x))`, shaped like the image.
    Gradient { g: f32, grad: Tensor<f32> },
    /// All logits were equal, so the gradient of `g` is undefined.
    Undefined,
}

/// One image's activations, `(layer id, tensor)` in requested order.
pub type LayerActivations = Vec<(String, Tensor<f32>)>;

/// Opaque model evaluator. Images are `H x W x 3` tensors.
pub trait ModelRunner {
    fn info(&self) -> &RunnerInfo;

    /// Activations of `layers` per image, in requested layer order.
    fn activations(&mut self, images: &[Tensor<f32>], layers: &[String]) -> Result<Vec<LayerActivations>, RunnerError>;

    fn logits(&mut self, images: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>, RunnerError>;

    fn grad_g(&mut self, images: &[Tensor<f32>]) -> Result<Vec<GradOutcome>, RunnerError>;
}

impl<R: ModelRunner + ?Sized> ModelRunner for Box<R> {
    fn info(&self) -> &RunnerInfo {
        (**self).info()
    }

    fn activations(&mut self, images: &[Tensor<f32>], layers: &[String]) -> Result<Vec<LayerActivations>, RunnerError> {
        (**self).activations(images, layers)
    }

    fn logits(&mut self, images: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>, RunnerError> {
        (**self).logits(images)
    }

    fn grad_g(&mut self, images: &[Tensor<f32>]) -> Result<Vec<GradOutcome>, RunnerError> {
        (**self).grad_g(images)
    }
}

impl<R: ModelRunner + ?Sized> ModelRunner for &mut R {
    fn info(&self) -> &RunnerInfo {
        (**self).info()
    }

    fn activations(&mut self, images: &[Tensor<f32>], layers: &[String]) -> Result<Vec<LayerActivations>, RunnerError> {
        (**self).activations(images, layers)
    }

    fn logits(&mut self, images: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>, RunnerError> {
        (**self).logits(images)
    }

    fn grad_g(&mut self, images: &[Tensor<f32>]) -> Result<Vec<GradOutcome>, RunnerError> {
        (**self).grad_g(images)
    }
}

/// Per-image model evaluation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounter {
    pub forward_count: u64,
    pub gradient_count: u64,
}

/// Counts every evaluation passing through to the wrapped runner.
pub struct AuditedRunner<R> {
    inner: R,
    counter: EvalCounter,
}

impl<R: ModelRunner> AuditedRunner<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, counter: EvalCounter::default() }
    }

    pub fn counter(&self) -> EvalCounter {
        self.counter
    }

    pub fn inner(&self) -> &R {
        &self.inner
    }

    pub fn into_inner(self) -> R {
        self.inner
    }
}

impl<R: ModelRunner> ModelRunner for AuditedRunner<R> {
    fn info(&self) -> &RunnerInfo {
        self.inner.info()
    }

    fn activations(&mut self, images: &[Tensor<f32>], layers: &[String]) -> Result<Vec<LayerActivations>, RunnerError> {
        self.counter.forward_count += images.len() as u64;
        self.inner.activations(images, layers)
    }

    fn logits(&mut self, images: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>, RunnerError> {
        self.counter.forward_count += images.len() as u64;
        self.inner.logits(images)
    }

    fn grad_g(&mut self, images: &[Tensor<f32>]) -> Result<Vec<GradOutcome>, RunnerError> {
        self.counter.gradient_count += images.len() as u64;
        self.inner.grad_g(images)
    }
}

pub(crate) fn check_layers(requested: &[String], known: &[String]) -> Result<(), RunnerError> {
    if requested.is_empty() {
        return Err(RunnerError::InvalidInput("no layers requested".into()));
    }
    match requested.iter().find(|l| !known.contains(l)) {
        Some(layer) => Err(RunnerError::UnknownLayer { layer: layer.clone(), known: known.to_vec() }),
        None => Ok(()),
    }
}
