//! Reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod tape;

pub use gradcheck::*;
pub use graph::{Eager, Graph};
pub use tape::{Tape, Var};
