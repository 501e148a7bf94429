//! Dense linear algebra, seeded randomness, reverse-mode gradients and the
//! finite-difference oracle used to check them.

mod gradcheck;
mod matrix;
mod rng;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, value_and_grad, GradCheckReport};
pub use matrix::Matrix;
pub use rng::{seeded_normal, Rng};
pub use tape::{gelu, layer_norm, softmax_rows, GradTape, Gradients, Mask, NeighborTable, Var};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
