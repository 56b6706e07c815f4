pub mod baselines;
pub mod bnn;
pub mod checkpoint;
pub mod clue;
pub mod datasets;
pub mod dgm;
mod error;
pub mod evalfw;
pub mod presets;
pub mod uncertainty;

pub use error::{ClueError, Result};
