//! Reverse-mode differentiation over a linear tape.

pub mod check;
pub mod conv;
mod tape;

pub use check::{check_gradients, GradCheckOptions, GradCheckReport};
pub use tape::{sigmoid, softplus, CustomOp, Tape, Unary, Var};
