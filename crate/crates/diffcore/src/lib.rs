//! Small reverse-mode differentiation core: dense `f64` tensors, an eager
//! tape, the kernels the action-quality model needs, finite-difference
//! checking, parameter checkpoints and Adam.

mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
mod tensor;

pub use error::{CheckpointError, DiffError};
pub use gradcheck::{gradient_check, gradient_check_report, GradCheckReport};
pub use graph::{interpolation_taps, resample_rows, Axis, Gradients, Graph, LeafKind, NodeId, BCE_EPS, LAYER_NORM_EPS};
pub use params::{Adam, Bound, ParamStore};
pub use tensor::Tensor;
