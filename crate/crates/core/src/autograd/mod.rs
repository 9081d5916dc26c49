//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records each operation as it runs; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients into every value that asked
//! for one. The op set is deliberately narrow: exactly what the encoder,
//! adapters, convolutional heads and span loss need.

mod grid;
pub mod gradcheck;
mod kernels;
mod tape;

pub use grid::ValueGrid;
pub use tape::{CustomOp, Padding, Tape, Var};
