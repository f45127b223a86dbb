//! Dense reverse-mode automatic differentiation.
//!
//! Every trainable computation in the crate records onto a [`Graph`]; calling
//! [`Graph::backward`] on a scalar node fills in gradients for all leaves that
//! were created with [`Graph::param`]. Only scalar-with-tensor broadcasting is
//! supported; row and column tiling is explicit via
//! [`Graph::repeat_rows`] / [`Graph::repeat_cols`].

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{gradcheck, relative_error, GradcheckReport, ParamCheck, RELATIVE_FLOOR};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
