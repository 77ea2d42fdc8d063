//! Minimal reverse-mode automatic differentiation for small convolutional models.
//!
//! Tensors are dense `f64` arrays. A [`Tape`] records one forward pass;
//! [`Tape::backward`] returns gradients for every recorded node. Trainable
//! tensors live in a [`ParamStore`] and are bound onto a tape per pass.

pub mod conv;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{central_differences, GradSample};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
