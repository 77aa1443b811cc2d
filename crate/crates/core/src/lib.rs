//! Early action prediction from partially observed videos.
//!
//! The crate covers the whole pipeline: a synthetic motion dataset with a known
//! accuracy ceiling, observation-ratio clip sampling, temporal-difference token
//! masking, a tubelet transformer with a forecasting decoder, training with the
//! compound prediction + oracle loss, and single-model evaluation across
//! observation ratios.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod masker;
pub mod model;
pub mod optim;
pub mod plot;
pub mod sampler;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};
