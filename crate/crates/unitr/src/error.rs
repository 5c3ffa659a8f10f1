//! Error types shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// No point of the input cloud fell inside the configured range.
    #[error("no point falls inside the voxelization range")]
    EmptyCloud,

    /// A view of the pseudo depth table received zero valid projections.
    /// The view cannot participate in 3D fusion; callers treat it as
    /// per-view passthrough rather than a fatal condition.
    #[error("pseudo depth table is empty for view {view}")]
    EmptyTable { view: usize },

    /// Input tensor dimensions violate a structural precondition.
    #[error("bad shape: {0}")]
    BadShape(String),

    /// A gather index points outside the source token sequence.
    #[error("index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },

    /// Scatter inputs do not match the partition they were built from.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Two set batches were built with different set sizes.
    #[error("tau mismatch: {left} vs {right}")]
    TauMismatch { left: usize, right: usize },

    /// An attention layer produced NaN or Inf activations.
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    /// Two lidar tokens mapped to the same BEV cell, violating the
    /// pillar invariant.
    #[error("duplicate BEV cell ({x}, {y})")]
    DuplicateCell { x: i64, y: i64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("container format error: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
