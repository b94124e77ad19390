//! Dense two-dimensional tensors with tape-based reverse-mode differentiation.
//!
//! Every value on a [`Tape`] is a row-major `rows × cols` [`Matrix`]. Graph
//! layers are expressed with a handful of primitives plus the segment
//! reductions used for neighbourhood aggregation and pooling. Tapes are
//! generic over [`Real`] so the same code trains in `f32` and is gradient
//! checked in `f64`.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{finite_difference_gradient, grad_check, relative_error};
pub use matrix::{gemm, Matrix, Real};
pub use tape::{Gradients, Tape, Var};
