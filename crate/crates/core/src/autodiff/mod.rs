//! Reverse-mode differentiation over [`Tensor`](crate::Tensor) values.
//!
//! Ops are recorded on a [`Tape`]; models bind their [`ParamStore`] to a tape
//! through a [`Session`]. [`finite_difference_check`] is the independent
//! oracle every differentiable op is tested against.

mod gradcheck;
mod ops;
mod params;
mod session;
mod tape;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckOptions, GradCheckReport};
pub use ops::{softmax, BinaryOp, GATHER_PAD};
pub use params::{ParamBuilder, ParamId, ParamRole, ParamStore, Parameter};
pub use session::Session;
pub use tape::{Gradients, Tape, Var};
