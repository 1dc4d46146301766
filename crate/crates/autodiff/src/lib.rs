//! Minimal dense-tensor arithmetic with reverse-mode differentiation.
//!
//! Everything is `f64`. Graphs are built symbolically, evaluated with
//! [`Graph::forward`] and differentiated with [`Graph::backward`];
//! [`check_gradients`] compares the result against central differences.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_tensors, read_tensors_binary, write_tensors, write_tensors_binary};
pub use error::{AutodiffError, Result};
pub use gradcheck::{check_gradients, relative_error, GradCheckReport};
pub use graph::{log_sigmoid, sigmoid, Graph, NodeId};
pub use params::{Gradients, ParamStore};
pub use tensor::Tensor;
