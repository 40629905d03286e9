//! Optimization, scheduling, checkpoints and the training loop.

mod checkpoint;
mod optim;
mod state;
mod trainer;

pub use checkpoint::*;
pub use optim::*;
pub use state::{model_checkpoint, restore_model};
pub use trainer::*;
