pub mod augment;
pub mod error;
pub mod eval;
pub mod host;
pub mod nn;
pub mod pairs;
pub mod plots;
pub mod rng;
pub mod runner;
pub mod trainer;
pub mod translators;

pub use error::{KtError, Result};
