//! Minimal convolutional network engine: a fixed layer vocabulary wired as a
//! DAG, reverse-mode gradients, categorical cross-entropy with L2, Adam and
//! a callback-driven training loop.

pub mod adam;
pub mod graph;
pub mod layer;
pub mod loss;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use graph::{ForwardOpts, Gradients, Graph, GraphSpec, Mode, Trace};
pub use layer::{Layer, LayerKind, LayerSpec, GRAPH_INPUT};
pub use loss::{argmax_accuracy, cross_entropy, softmax};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{train_loop, History, SampleSet, StopMetric, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("batch-norm needs at least 2 samples in training mode")]
    BatchTooSmall,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("non-finite value produced by layer '{layer}'")]
    Numerical { layer: String },
    #[error("label error: {0}")]
    Label(String),
    #[error("unknown layer '{0}'")]
    UnknownLayer(String),
    #[error("graph error: {0}")]
    Graph(String),
}
