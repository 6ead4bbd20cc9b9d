pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod envs;
pub mod error;
pub mod nn;
pub mod oppo;
pub mod rng;
pub mod rundir;
pub mod seqnets;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
