//! Grid-graph convolutional fusion (GCF) for facial expression recognition.
//!
//! A small CNN produces a feature map that is cut into a 3×3 grid of region
//! vectors. A normalized graph convolution mixes the regions, and the result
//! is concatenated with a global image vector before a softmax classifier.

pub mod backbone;
pub mod data;
pub mod graph;
pub mod model;
pub mod parallel;
pub mod real;
pub mod tensor;
pub mod train;

pub use model::{GcfModel, ModelConfig, ModelError, ModelParams};
pub use real::{Precision, Real};
pub use tensor::{Tape, Tensor, TensorError, Var};
