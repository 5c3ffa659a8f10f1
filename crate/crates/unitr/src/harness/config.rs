//! One structured JSON config drives the whole engine. Unknown keys are
//! errors so typos fail fast.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::WeightsSpec;
use crate::backbone::{BackboneParams, BlockConfig, BlockKind};
use crate::error::{Error, Result};
use crate::geometry::{Box3, CameraRig, CameraView};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub rig: RigConfig,
    pub tokenizer: TokenizerConfig,
    pub partition: PartitionConfig,
    pub attention: AttentionConfig,
    pub blocks: BlocksConfig,
    pub run: RunConfig,
}

/// Ring rig parameters, or explicit per-view matrices when `explicit_views`
/// is set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RigConfig {
    pub views: usize,
    /// (height, width) in pixels.
    pub image_size: [usize; 2],
    /// Defaults to full ring coverage with 25% overlap when absent.
    pub focal: Option<[f64; 2]>,
    /// Defaults to the image center.
    pub principal: Option<[f64; 2]>,
    /// Camera center height above the world origin, meters.
    pub height: f64,
    /// Ring radius, meters.
    pub radius: f64,
    /// Downward tilt, degrees.
    pub pitch_deg: f64,
    pub explicit_views: Option<Vec<ViewConfig>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics: [[f64; 4]; 4],
    pub image_size: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub grid_size: [f64; 3],
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub patch_size: usize,
    pub extra_feature_dim: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub tau: usize,
    pub lidar_window: [i64; 3],
    pub image_window: [i64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub hidden_channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BlocksConfig {
    pub sequence: Vec<BlockKind>,
    pub layers_per_block: usize,
    pub pseudo_grid_shape: [usize; 3],
    pub offset_in_pixels: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic scene point count.
    pub points: usize,
    /// Synthetic scene box count.
    pub boxes: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            rig: RigConfig {
                views: 6,
                image_size: [256, 704],
                focal: None,
                principal: None,
                height: 0.2,
                radius: 0.7,
                pitch_deg: 5.0,
                explicit_views: None,
            },
            tokenizer: TokenizerConfig {
                grid_size: [0.3, 0.3, 8.0],
                range_min: [-54.0, -54.0, -5.0],
                range_max: [54.0, 54.0, 3.0],
                patch_size: 8,
                extra_feature_dim: 1,
                channels: 128,
            },
            partition: PartitionConfig {
                tau: 90,
                lidar_window: [30, 30, 1],
                image_window: [30, 30, 1],
            },
            attention: AttentionConfig { heads: 8, hidden_channels: 256 },
            blocks: BlocksConfig {
                sequence: vec![
                    BlockKind::Intra,
                    BlockKind::Inter2d,
                    BlockKind::Inter2d,
                    BlockKind::Inter3d,
                ],
                layers_per_block: 2,
                pseudo_grid_shape: [360, 360, 20],
                offset_in_pixels: false,
            },
            run: RunConfig { points: 20_000, boxes: 12 },
        }
    }
}

impl Config {
    /// `"default"` loads the built-in configuration, anything else is a
    /// path to a JSON file.
    pub fn resolve(spec: &str) -> Result<Self> {
        if spec == "default" {
            Ok(Self::default())
        } else {
            Self::load(std::path::Path::new(spec))
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rig.views == 0 {
            return Err(Error::Config("rig needs at least one view".into()));
        }
        if !self.tokenizer.channels.is_multiple_of(self.attention.heads) {
            return Err(Error::Config("channels must divide into heads".into()));
        }
        if self.tokenizer.patch_size == 0
            || !self.rig.image_size[0].is_multiple_of(self.tokenizer.patch_size)
            || !self.rig.image_size[1].is_multiple_of(self.tokenizer.patch_size)
        {
            return Err(Error::Config("image size must be divisible by patch size".into()));
        }
        if self.range().is_degenerate() {
            return Err(Error::Config("tokenizer range is degenerate".into()));
        }
        self.block_config().validate()
    }

    /// SHA-256 over the canonical JSON form, hex-encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn range(&self) -> Box3 {
        Box3 { min: self.tokenizer.range_min, max: self.tokenizer.range_max }
    }

    pub fn weights_spec(&self) -> WeightsSpec {
        WeightsSpec {
            channels: self.tokenizer.channels,
            hidden: self.attention.hidden_channels,
            heads: self.attention.heads,
            layers: self.blocks.sequence.len() * self.blocks.layers_per_block,
            voxel_in_dim: 3 + self.tokenizer.extra_feature_dim,
            patch_in_dim: self.tokenizer.patch_size * self.tokenizer.patch_size * 3,
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            sequence: self.blocks.sequence.clone(),
            layers_per_block: self.blocks.layers_per_block,
            lidar_window: self.partition.lidar_window,
            image_window: self.partition.image_window,
            tau: self.partition.tau,
            offset_in_pixels: self.blocks.offset_in_pixels,
        }
    }

    pub fn backbone_params(&self, keep_intermediate: bool) -> BackboneParams {
        BackboneParams {
            grid_size: self.tokenizer.grid_size,
            range: self.range(),
            patch: self.tokenizer.patch_size,
            block: self.block_config(),
            keep_intermediate,
        }
    }

    /// Build the camera rig: explicit matrices when given, else a ring of
    /// outward-facing cameras evenly spaced in yaw.
    pub fn build_rig(&self) -> Result<CameraRig> {
        if let Some(views) = &self.rig.explicit_views {
            let cams = views
                .iter()
                .map(|v| {
                    let mut k = Matrix3::zeros();
                    let mut e = Matrix4::zeros();
                    for r in 0..3 {
                        for c in 0..3 {
                            k[(r, c)] = v.intrinsics[r][c];
                        }
                    }
                    for r in 0..4 {
                        for c in 0..4 {
                            e[(r, c)] = v.extrinsics[r][c];
                        }
                    }
                    CameraView::new(k, e, (v.image_size[0], v.image_size[1]))
                })
                .collect::<Result<Vec<_>>>()?;
            return CameraRig::new(cams);
        }

        let b = self.rig.views;
        let (h, w) = (self.rig.image_size[0], self.rig.image_size[1]);
        let [fx, fy] = self.rig.focal.unwrap_or_else(|| {
            // Full 360/B degrees per camera plus 25% overlap, capped so
            // few-camera rigs keep a sane (positive) focal length.
            let half = (std::f64::consts::PI / b as f64 * 1.25).min(1.2);
            let f = w as f64 / 2.0 / half.tan();
            [f, f]
        });
        let [cx, cy] =
            self.rig.principal.unwrap_or([w as f64 / 2.0, h as f64 / 2.0]);
        let pitch = self.rig.pitch_deg.to_radians();

        let views = (0..b)
            .map(|i| {
                let yaw = std::f64::consts::TAU * i as f64 / b as f64;
                let position = Vector3::new(
                    self.rig.radius * yaw.cos(),
                    self.rig.radius * yaw.sin(),
                    self.rig.height,
                );
                // Camera basis in world coordinates: z forward (outward,
                // tilted down by pitch), x right, y down.
                let forward = Vector3::new(
                    yaw.cos() * pitch.cos(),
                    yaw.sin() * pitch.cos(),
                    -pitch.sin(),
                );
                let right = forward.cross(&Vector3::z()).normalize();
                let down = forward.cross(&right);
                let rot = Matrix3::from_rows(&[
                    right.transpose(),
                    down.transpose(),
                    forward.transpose(),
                ]);
                // Renormalize through nalgebra so the rotation passes the
                // rigid-transform invariant exactly.
                let rot = Rotation3::from_matrix(&rot).into_inner();
                let mut e = Matrix4::identity();
                e.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
                e.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-rot * position));
                let mut k = Matrix3::identity();
                k[(0, 0)] = fx;
                k[(1, 1)] = fy;
                k[(0, 2)] = cx;
                k[(1, 2)] = cy;
                CameraView::new(k, e, (h, w))
            })
            .collect::<Result<Vec<_>>>()?;
        CameraRig::new(views)
    }
}
