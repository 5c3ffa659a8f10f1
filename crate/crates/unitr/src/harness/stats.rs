//! Per-block partition statistics for the `stats` CLI subcommand.

use serde_json::json;

use crate::backbone::{lift_tokens_3d, mixed_set_count, project_tokens_2d, BlockKind};
use crate::error::Result;
use crate::geometry::{CameraRig, PseudoDepthTable};
use crate::partition::{dynamic_set_partition, SetOrder, SpaceTag, WindowSpec};
use crate::tokenizers::{Modality, TokenSequence};

use super::config::Config;

/// Partition statistics for every block of the configured sequence,
/// computed on the tokenizer output (feature values never affect
/// partition structure).
pub fn block_partition_stats(
    cfg: &Config,
    tokens: &TokenSequence,
    rig: &CameraRig,
    table: Option<&PseudoDepthTable>,
) -> Result<serde_json::Value> {
    let tau = cfg.partition.tau;
    let lidar_spec = WindowSpec::new(cfg.partition.lidar_window, SpaceTag::Lidar3d);
    let image_spec = WindowSpec::new(cfg.partition.image_window, SpaceTag::Image2d);
    let n = tokens.lidar_count;

    let mut blocks = Vec::new();
    for (bi, kind) in cfg.blocks.sequence.iter().enumerate() {
        let entry = match kind {
            BlockKind::Intra => {
                let lidar = dynamic_set_partition(
                    &tokens.coords[..n],
                    &lidar_spec,
                    tau,
                    SetOrder::XMajor,
                );
                let image = dynamic_set_partition(
                    &tokens.coords[n..],
                    &image_spec,
                    tau,
                    SetOrder::XMajor,
                );
                json!({
                    "block": bi,
                    "kind": "intra",
                    "lidar": lidar.stats(),
                    "image": image.stats(),
                })
            }
            BlockKind::Inter2d => {
                let (participants, coords) = project_tokens_2d(tokens, rig)?;
                let part = dynamic_set_partition(&coords, &image_spec, tau, SetOrder::XMajor);
                let modality: Vec<Modality> =
                    participants.iter().map(|t| tokens.modality[*t]).collect();
                json!({
                    "block": bi,
                    "kind": "inter2d",
                    "merged": part.stats(),
                    "mixed_sets": mixed_set_count(&part, &modality),
                    "passthrough": tokens.len() - participants.len(),
                })
            }
            BlockKind::Inter3d => {
                let table = table.ok_or_else(|| {
                    crate::error::Error::Config("stats for inter3d need a depth table".into())
                })?;
                let lifted = lift_tokens_3d(tokens, table, rig)?;
                let part =
                    dynamic_set_partition(&lifted.coords, &lidar_spec, tau, SetOrder::XMajor);
                let modality: Vec<Modality> =
                    lifted.participants.iter().map(|t| tokens.modality[*t]).collect();
                json!({
                    "block": bi,
                    "kind": "inter3d",
                    "merged": part.stats(),
                    "mixed_sets": mixed_set_count(&part, &modality),
                    "passthrough": tokens.len() - lifted.participants.len(),
                })
            }
        };
        blocks.push(entry);
    }
    Ok(json!({
        "lidar_tokens": n,
        "image_tokens": tokens.image_count(),
        "tau": tau,
        "blocks": blocks,
    }))
}
