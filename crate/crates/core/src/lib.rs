//! Global contrastive objectives and their stochastic optimizers at desk
//! scale: exact brute-force oracles over a finite augmentation family,
//! mini-batch SimCLR baselines, SogCLR with per-sample moving-average
//! statistics, and a bimodal two-way variant.

pub mod bimodal;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod objective;
pub mod optimizers;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
