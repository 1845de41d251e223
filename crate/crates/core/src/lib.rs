//! Amortized posterior clustering with a generative flow network whose
//! policy and reward share one permutation-invariant energy network.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod flows;
pub mod losses;
pub mod model;
pub mod partitions;
pub mod trainer;

pub use error::{Error, Result};
