//! Run manifests. The manifest holds only run-deterministic facts so two
//! runs with equal seed and config emit byte-identical files; wall-clock
//! timings go to a separate informational file.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::BackboneWeights;
use crate::backbone::{expected_dispatches, BackboneRun, BlockConfig, DispatchMode};
use crate::harness::config::Config;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub mode: String,
    pub block_sequence: Vec<String>,
    pub layers_per_block: usize,
    pub dispatches: u64,
    pub expected_dispatches: u64,
    pub per_block_dispatches: Vec<u64>,
    pub lidar_tokens: usize,
    pub image_tokens: usize,
    pub bev_shape: [usize; 3],
    pub bev_sha256: String,
}

impl RunManifest {
    pub fn new(cfg: &Config, seed: u64, mode: DispatchMode, run: &BackboneRun) -> Self {
        let block = cfg.block_config();
        let (gx, gy, c) = run.bev.features.dim();
        Self {
            seed,
            config_hash: cfg.hash(),
            mode: mode_name(mode).into(),
            block_sequence: block_names(&block),
            layers_per_block: block.layers_per_block,
            dispatches: run.dispatches,
            expected_dispatches: expected_dispatches(&block, mode),
            per_block_dispatches: run.per_block_dispatches.clone(),
            lidar_tokens: run.lidar_tokens,
            image_tokens: run.image_tokens,
            bev_shape: [gx, gy, c],
            bev_sha256: sha256_hex(run.bev.to_container().to_bytes().unwrap_or_default()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Wall-clock block timings; informational only and never compared.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTimings {
    pub per_block_millis: Vec<f64>,
    pub total_millis: f64,
}

impl RunTimings {
    pub fn new(run: &BackboneRun) -> Self {
        Self {
            per_block_millis: run.per_block_millis.clone(),
            total_millis: run.per_block_millis.iter().sum(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("timings serialize")
    }
}

/// Tensor names, shapes, and creation seed of a weight store.
pub fn weights_manifest(w: &BackboneWeights) -> serde_json::Value {
    let mut tensors = Vec::new();
    w.for_each_tensor(|name, dims, _| {
        tensors.push(serde_json::json!({ "name": name, "shape": dims }));
    });
    serde_json::json!({ "seed": w.seed, "tensors": tensors })
}

pub fn mode_name(mode: DispatchMode) -> &'static str {
    match mode {
        DispatchMode::Parallel => "parallel",
        DispatchMode::Serial => "serial",
    }
}

pub fn block_names(block: &BlockConfig) -> Vec<String> {
    block
        .sequence
        .iter()
        .map(|k| {
            match k {
                crate::backbone::BlockKind::Intra => "intra",
                crate::backbone::BlockKind::Inter2d => "inter2d",
                crate::backbone::BlockKind::Inter3d => "inter3d",
            }
            .to_string()
        })
        .collect()
}

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    Sha256::digest(bytes.as_ref()).iter().map(|b| format!("{b:02x}")).collect()
}
