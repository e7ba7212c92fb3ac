//! Desk-scale all-in-one image restoration with sparse prompt routing and
//! contrastive prompt regularization. Everything is deterministic given a
//! root seed: data synthesis, initialization, training, and evaluation.

pub mod adam;
pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cpr;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod pixmap;
pub mod rawio;
pub mod seeds;
pub mod spm;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use cli::run;
pub use error::{Error, Result};
