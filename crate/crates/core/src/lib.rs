pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod evaluation;
pub mod error;
pub mod gradients;
pub mod latent;
pub mod model;
pub mod optimizer;
pub mod registry;

pub use error::{Error, Result};
