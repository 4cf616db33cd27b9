pub mod audiopipe;
pub mod config;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod ndgrad;
pub mod nn;
pub mod synth;
pub mod train;
pub mod trunk;
pub mod verify;

pub use error::{Error, Result};
