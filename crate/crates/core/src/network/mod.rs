//! The victim model: a stack of convolutions with elementwise activations and
//! one fully connected softmax classifier trained with cross-entropy.
//!
//! Feature maps are `(channel, row, col)` tensors; batches and images handed
//! in from outside are `(row, col, channel)`.

mod activation;
mod arch;
mod model;
mod params;

pub use activation::{
    activation_derivative_from_output, activation_forward, activation_inverse, ActivationKind,
};
pub use arch::{Architecture, ConvSpec, FcSpec, LossKind};
pub(crate) use model::softmax;
pub use model::{
    backward_example, forward, loss_and_gradients, ExampleGradients, ExampleTrace, ForwardTrace,
    GradientCapture, LayerActivations, LayerGradients,
};
pub use params::{init_parameters, ConvParams, FcParams, Parameters};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid activation: {0}")]
    InvalidActivation(String),
    #[error("{0} is not invertible")]
    NotInvertible(ActivationKind),
    #[error("value {value} lies outside the output range of {kind}")]
    Domain { kind: ActivationKind, value: f64 },
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("parameters do not match the architecture: {0}")]
    ParameterMismatch(String),
    #[error("batch is empty")]
    EmptyBatch,
}
