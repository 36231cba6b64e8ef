//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Only the operations the graph model needs are provided. Shapes are
//! explicit everywhere: the only broadcast is scalar-with-tensor through
//! [`Graph::scale`] and [`Graph::add_scalar`].

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_with, relative_error, GradCheckReport, DEFAULT_STEP};
pub use graph::{sigmoid, Activation, Graph, Reduce, Var};
pub use tensor::Tensor;
