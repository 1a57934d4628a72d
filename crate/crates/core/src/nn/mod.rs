//! Dense tensors, the MLP classifier and its optimizer.

mod matrix;
mod mlp;
mod optim;

pub use matrix::Matrix;
pub(crate) use matrix::{dot, squared_distance};
pub use mlp::{weighted_param_sum, ForwardCache, MlpParams, ParamGrads};
pub use optim::{sgd_step, sgd_step_in_place, SgdConfig};
