//! Image ingestion, patch tiling and dataset pairing.

mod image;
mod pairs;
mod patches;

pub use self::image::*;
pub use pairs::*;
pub use patches::*;
