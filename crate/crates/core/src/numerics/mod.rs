//! Dense matrix arithmetic and reverse-mode automatic differentiation.

pub mod matrix;
pub mod tape;

pub use matrix::Matrix;
pub use tape::{Node, Tape};
