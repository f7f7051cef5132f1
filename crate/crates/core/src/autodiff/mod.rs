//! Differentiation engine.
//!
//! * [`Jet2`] carries a value with its first and second derivative along one
//!   input coordinate (truncated Taylor arithmetic).
//! * [`Tape`]/[`Var`] record scalar computations for reverse-mode gradients.
//!
//! Both are generic over [`Scalar`], so a `Jet2<Var>` is a jet whose three
//! channels live on the tape. Backpropagating through it yields parameter
//! gradients of input derivatives (forward-over-reverse).

mod gradcheck;
mod jet;
mod scalar;
mod tape;

pub use gradcheck::{central_differences, grad_check, GradCheck, GRADCHECK_REL_FLOOR};
pub use jet::{jet_propagate, Jet2, JetOp};
pub use scalar::{sum, Scalar};
pub use tape::{gradient, Gradients, Op, Tape, Var};
