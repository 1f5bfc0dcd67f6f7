//! Reverse-mode automatic differentiation over dense arrays.

mod gradcheck;
mod ops;
mod suite;
mod tape;

pub use gradcheck::{finite_diff_check, gradient_error, sample_coords, ScalarGraph};
pub use ops::{Activation, Conv1dSpec, ElementwiseKind};
pub use suite::{prim_inputs, primitive_suite, CheckResult, Prim, PrimGraph, PRIMS};
pub use tape::{DiffArray, Tape, Var};
