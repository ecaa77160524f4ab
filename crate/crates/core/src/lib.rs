pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod fsq;
pub mod harness;
pub mod heads;
pub mod lm;
pub mod nn;
pub mod ops;
pub mod prompts;
pub mod rng;
pub mod system;
pub mod text;
pub mod workflow;
pub mod world;

pub use error::{Error, Result};
