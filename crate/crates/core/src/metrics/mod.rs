//! Image quality metrics and output post-processing.

mod post;
mod quality;

pub use post::*;
pub use quality::*;
