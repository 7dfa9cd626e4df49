#![cfg_attr(not(test), no_std)]
//! Proposal-free instance segmentation by learning to cluster pixels.
//!
//! A fully convolutional network outputs, per pixel, a distribution over a
//! small set of instance indices (index 0 = background). Training uses only
//! the pairwise "same instance or not" relation between sampled pixels, so
//! any permutation of ground-truth IDs is an equally good target. With a
//! spatial distance threshold on the pairs, indices only need to differ
//! between nearby instances, which lets a fixed index budget label an
//! unbounded number of objects; connected components then recover the
//! individual instances.
//!
//! The crate is `no_std` + `alloc`; file formats, configuration and the
//! command-line front end live in the companion `pixclust` crate.

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod grid;
pub mod losses;
pub mod mask;
pub mod network;
pub mod postprocess;
pub mod rng;
pub mod sampling;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::Grid;
pub use tensor::Tensor;
