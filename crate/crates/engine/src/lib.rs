//! Minimal reverse-mode automatic differentiation with the layer set needed
//! by the genuinization autoencoder and the LCNN classifier: strided and
//! transposed convolution, batch normalization, (leaky) ReLU, Max-Feature-Map,
//! max pooling, affine layers, dropout, MSE and softmax cross-entropy losses,
//! and Adam with decoupled weight decay.
//!
//! Convolutions are cross-correlations (the kernel is not flipped).

pub mod checkpoint;
pub mod conv;
mod error;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod optim;
mod scalar;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, StoredTensor};
pub use error::{EngineError, Result};
pub use graph::{BatchNormState, Graph, Var};
pub use layers::{Forward, LayerSpec, ParamSet, Sequential};
pub use optim::{Adam, AdamConfig};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
