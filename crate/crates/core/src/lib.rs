//! Zero-shot composed image retrieval in a shared embedding space.
//!
//! Frozen synthetic encoders, two trainable token mappers, a semantic-set
//! miner, the training objectives, retrieval evaluation, a synthetic
//! attribute world, and the file formats used by the `cir` binary.

// Negated comparisons are how NaN parameters get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod encoders;
pub mod error;
pub mod io;
pub mod mappers;
pub mod numerics;
pub mod objectives;
pub mod retrieval;
pub mod rng;
pub mod sset;
pub mod trainer;

pub use error::{Error, Result};
