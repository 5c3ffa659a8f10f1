//! Everything around the core: synthetic scenes, brute-force oracles,
//! configuration, tensor-container I/O, run manifests, partition
//! statistics, and the invariant suite.

pub mod checks;
pub mod config;
pub mod container;
pub mod manifest;
pub mod oracle;
pub mod scene;
pub mod stats;
