//! Dense matrices, the autodiff tape, and trainable parameter storage.

pub mod gradcheck;
mod graph;
mod matrix;
mod params;

pub use graph::{sigmoid, softmax_rows, Activation, Gradients, Graph, NodeId, EXP_INPUT_LIMIT};
pub(crate) use graph::log_sum_exp;
pub use matrix::Matrix;
pub use params::{xavier_uniform, Param, ParamStore, PARAMS_FORMAT, PARAMS_VERSION};
