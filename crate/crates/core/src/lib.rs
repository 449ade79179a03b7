//! Composable manipulation skills: primitives pretrained by asymmetric
//! self-play inside a multiplicative compositional policy, then reused by
//! per-task orchestrators.

pub mod analysis;
pub mod asp;
pub mod checkpoint;
pub mod config;
pub mod downstream;
pub mod env;
pub mod error;
pub mod nn;
pub mod policy;
pub mod ppo;

pub use error::{Error, Result};

/// Random number generator used throughout; seeded explicitly everywhere.
pub type SimRng = rand_chacha::ChaCha8Rng;
