//! Point-query 3D occupancy prediction.
//!
//! The crate is `no_std` (with `alloc`) and contains the pure numerical parts
//! of the pipeline: a small reverse-mode tensor engine, pinhole geometry and
//! voxel ray casting, points of interest, the point decoder, losses, metrics,
//! the procedural scene generator and volume refinement. File formats, the
//! training driver and the command line live in the `osp` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod decoder;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod metrics;
#[cfg(any(test, feature = "oracles"))]
pub mod oracle;
pub mod poi;
pub mod refine;
pub mod synthworld;

pub use error::{Error, Result};

/// Seeded generator used everywhere a stochastic choice is made.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds the crate's standard generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
