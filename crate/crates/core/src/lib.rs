pub mod adapt;
pub mod attack;
pub mod classifier;
pub mod cli;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod smoothing;
pub mod stats;

pub use error::{Error, Result};
