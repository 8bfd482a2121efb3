//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! [`Tape`] records primitives as they run; [`Tape::backward`] returns the
//! gradient of a scalar root with respect to every leaf. Element precision is
//! a type parameter so the same model code runs in `f32` for training and in
//! `f64` for gradient checks.

pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod suite;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_each, GradCheckOptions, GradCheckReport, Input, Precision, TapeFn};
pub use kernels::Real;
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
