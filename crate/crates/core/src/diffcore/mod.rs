//! Deterministic 64-bit reverse-mode differentiation over rank-4 grids.

mod gemm;
pub mod gradcheck;
pub mod grid;
pub mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP};
pub use grid::Grid4;
pub use tape::{bce_logit, sigmoid, DiscriminativeMargins, InstanceSets, Tape, Var};
