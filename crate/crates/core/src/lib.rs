//! Cooperative multi-agent Q-learning with a trainable, semantically
//! structured episodic memory.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense layers, layer normalization, analytic gradients, Adam.
//! - [`env`]: the Dec-POMDP interface and the two-agent coordination gridworld.
//! - [`embedding`]: random projection, EmbNet and dCAE state embedders.
//! - [`memory`]: the episodic buffer with desirability bookkeeping.
//! - [`incentive`]: episodic incentive, episodic-control regularizers, E3B.
//! - [`marl`]: value-factorized Q-learning and the outer training loop.
//! - [`harness`]: experiment specs, multi-seed runs, metrics and comparison.

pub mod embedding;
pub mod env;
pub mod error;
pub mod harness;
pub mod incentive;
pub mod marl;
pub mod memory;
pub mod numerics;

pub use error::{Error, Result};

/// Seeded random stream used everywhere randomness is consumed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's RNG from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
