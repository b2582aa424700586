pub mod autograd;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grounding;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod tasks;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
