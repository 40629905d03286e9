//! Layer vocabulary: forward kernels and their backward maps.
//!
//! These are pure functions over tensors. [`Tape`](crate::Tape) wraps them
//! into differentiable recorded operations; [`Eager`](crate::Eager) calls
//! them directly for inference.

mod activation;
mod conv;
mod dropout;
mod elementwise;
mod norm;
mod pool;

pub use activation::*;
pub use conv::*;
pub use dropout::*;
pub use elementwise::*;
pub use norm::*;
pub use pool::*;
