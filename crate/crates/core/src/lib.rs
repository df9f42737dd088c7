//! Cross-view world model laboratory: simulator, dataset, diffusion model,
//! training schemes and evaluation protocols.

pub mod error;
pub mod dataset;
pub mod sim;
pub mod model;
pub mod training;
pub mod eval;

pub use error::{Result, XvwmError};
