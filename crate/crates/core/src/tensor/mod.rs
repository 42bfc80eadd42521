//! Dense `f64` matrices, a differentiation tape, and Adam.

mod adam;
mod dense;
mod params;
mod tape;

pub use adam::AdamState;
pub use dense::DenseTensor;
pub use params::{named_rng, ParamId, ParamStore};
pub use tape::{
    bce_logit, leaky_relu, sigmoid, softmax_rows, softplus, Gradients, NodeId, Tape, LEAKY_SLOPE,
};
