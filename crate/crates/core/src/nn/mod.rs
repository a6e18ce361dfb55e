//! Feed-forward convolutional networks: construction, forward and backward
//! passes, softmax cross-entropy, regularised AdaGrad, output-class growth
//! and JSON archiving.

mod adagrad;
mod archive;
mod classes;
mod network;
mod params;
mod spec;
mod tensor;

pub use adagrad::adagrad_update;
pub use archive::{ModelArchive, FORMAT_VERSION};
pub use classes::add_output_class;
pub use network::{argmax, build_network, softmax, ForwardCache, Network, Pass};
pub use params::{
    AdaGradState, GradientBundle, Gradients, Hyperparams, LayerParams, ParamSet, Params,
};
pub use spec::{LayerSpec, NetworkSpec, SlotShape};
pub use tensor::{Shape, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("layer {layer}: {reason}")]
    ShapeMismatch { layer: usize, reason: String },
    #[error("layer {index}: unknown layer kind {kind:?}")]
    UnknownLayerKind { index: usize, kind: String },
    #[error("input shape {found} does not match network input {expected}")]
    InputShape { expected: Shape, found: Shape },
    #[error("tensor of shape {shape} cannot hold {len} values")]
    TensorLength { shape: Shape, len: usize },
    #[error("non-finite input value at index {index}")]
    NonFiniteInput { index: usize },
    #[error("label index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("activation cache does not come from a training pass of this network")]
    CacheMismatch,
    #[error("parameter layout: {0}")]
    ParamLayout(String),
    #[error("non-finite gradient at flat index {index}; update rejected")]
    NonFiniteGradient { index: usize },
    #[error("invalid hyperparameter {field} = {value}")]
    InvalidHyperparam { field: &'static str, value: f64 },
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("archive format {found:?} is not supported (expected {expected:?})")]
    FormatVersion {
        found: String,
        expected: &'static str,
    },
}
