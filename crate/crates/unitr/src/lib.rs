//! Forward-inference engine for a unified multi-modal set-attention
//! backbone over camera and LiDAR data.
//!
//! Point clouds and multi-view images are tokenized onto sparse lattices,
//! partitioned into size-equivalent attention sets, processed by
//! weight-shared intra-modal and 2D/3D inter-modal transformer blocks, and
//! pooled into a bird's-eye-view grid. Everything is deterministic under a
//! seed and checkable against brute-force oracles at desk scale; the
//! `harness` module carries the scene generator, oracles, and the
//! invariant suite behind `unitr check`.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod partition;
pub mod rng;
pub mod tokenizers;

pub use error::{Error, Result};
