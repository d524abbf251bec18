//! Switchable Normalization with hand-written backward passes.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] holds the dense NCHW array and the seeded generator.
//! * [`stats`] computes IN/LN/BN/GN statistics, including the reuse path
//!   that derives LN and BN moments from IN moments and the pooled
//!   statistics of a partitioned batch.
//! * [`baseline`] implements plain IN, LN, BN and GN layers.
//! * [`snlayer`] implements the switchable layer itself.
//! * [`inference`] estimates the frozen BN statistics used at test time.
//! * [`trainer`] is a small convolutional classifier used for experiments.
//! * [`gradcheck`] runs central-difference checks over every layer.
//! * [`cli`] backs the `snlab` binary.

pub mod baseline;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod snlayer;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SnError};
pub use tensor::{Dims, Rng, Tensor4};
