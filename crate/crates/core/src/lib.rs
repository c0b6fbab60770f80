//! Class-incremental learning with global distillation from a previous
//! model, a current-task teacher and their ensemble, using confidence-sampled
//! unlabeled data.

pub mod config;
pub mod coreset;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nnet;
pub mod runner;
pub mod sampler;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
