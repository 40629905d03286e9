//! EraseNet-3 / EraseNet-4.

mod erasenet;
mod params;
mod spec;

pub use erasenet::*;
pub use params::{Param, ParamKind, ParamStore};
pub use spec::*;
