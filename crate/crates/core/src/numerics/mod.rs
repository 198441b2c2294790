//! Dense `f64` tensors, a differentiable computation record, and a
//! finite-difference gradient oracle.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var, ZERO_KEY_NORM};
pub use params::{mlp_forward, MlpIds, MlpVars, ParamId, ParameterSet};
pub use tensor::{column_l2_distance, softmax_temperature, Tensor};
