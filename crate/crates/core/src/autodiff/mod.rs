//! Reverse-mode automatic differentiation and the Adam optimizer used to
//! push gradients back into embedding rows.

mod adam;
mod tape;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use tape::{cosine, AutodiffError, Gradients, Shape, Tape, Value};
