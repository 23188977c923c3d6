pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod correlation;
mod error;
pub mod evaluation;
pub mod lie;
pub mod neural_opt;
pub mod nn;
pub mod pointcloud;
pub mod tracker;
pub mod verify;

pub use error::{Error, Result};
