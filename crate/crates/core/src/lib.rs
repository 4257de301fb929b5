//! Temporal aggregate representations for long-range sequence anticipation.

pub mod autodiff;
pub mod baselines;
pub mod blocks;
pub mod config;
pub mod error;
pub mod heads;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod recurrent;
pub mod rng;
pub mod snippets;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
