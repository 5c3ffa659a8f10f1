//! Assembles tokenizers, partitioning, geometry, and attention into the
//! block sequence — intra-modal, inter-modal 2D, inter-modal 3D — and pools
//! the enriched lidar tokens into a bird's-eye-view grid.
//!
//! Blocks never move, add, or drop tokens: coordinates and modality tags
//! are read-only, only features change. Tokens excluded from a fusion
//! space (lidar invisible to every camera in 2D, image tokens without a
//! depth estimate in 3D) pass through their block bit-identical.

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::attention::{
    batched_layer_over_modalities, set_attention_layer, BackboneWeights, DispatchCounter,
    SetBatch,
};
use crate::error::{Error, Result};
use crate::geometry::{project_to_first_hit, unproject, Box3, CameraRig, PseudoDepthTable};
use crate::harness::container::{f64_bits, TensorContainer, TensorEntry};
use crate::partition::{
    dynamic_set_partition, gather, scatter_canonical_filtered, SetOrder, SetPartition, SpaceTag,
    WindowSpec,
};
use crate::tokenizers::{patchify, voxelize, ImageStack, Modality, PointCloud, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Intra,
    #[serde(rename = "inter2d")]
    Inter2d,
    #[serde(rename = "inter3d")]
    Inter3d,
}

/// Whether each layer issues one fused dispatch or the serial reference
/// grouping. Serial mirrors a system of per-modality encoders run in
/// sequence: intra layers dispatch once per modality, 2D fusion layers
/// dispatch once per modality it updates, and 3D fusion runs once inside
/// the program that owns 3D space. The math is identical either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchMode {
    Parallel,
    Serial,
}

/// Block sequence and the shared partition/attention geometry.
#[derive(Debug, Clone)]
pub struct BlockConfig {
    pub sequence: Vec<BlockKind>,
    /// Even, so X-major and Y-major rotations alternate completely.
    pub layers_per_block: usize,
    pub lidar_window: [i64; 3],
    pub image_window: [i64; 3],
    pub tau: usize,
    /// Offset-MLP distances in pixels instead of patch-grid units.
    pub offset_in_pixels: bool,
}

impl BlockConfig {
    pub fn total_layers(&self) -> usize {
        self.sequence.len() * self.layers_per_block
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequence.is_empty() {
            return Err(Error::Config("block sequence is empty".into()));
        }
        if self.layers_per_block == 0 || !self.layers_per_block.is_multiple_of(2) {
            return Err(Error::Config("layers per block must be even and positive".into()));
        }
        if self.tau == 0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }

    fn lidar_spec(&self) -> WindowSpec {
        WindowSpec::new(self.lidar_window, SpaceTag::Lidar3d)
    }

    fn image_spec(&self) -> WindowSpec {
        WindowSpec::new(self.image_window, SpaceTag::Image2d)
    }
}

/// Dispatches one layer of the given block kind issues under each mode,
/// assuming both modalities are present.
pub fn dispatches_per_layer(kind: BlockKind, mode: DispatchMode) -> u64 {
    match mode {
        DispatchMode::Parallel => 1,
        DispatchMode::Serial => match kind {
            BlockKind::Intra => 2,
            BlockKind::Inter2d => 2,
            BlockKind::Inter3d => 1,
        },
    }
}

/// Total expected dispatch count for a block sequence.
pub fn expected_dispatches(cfg: &BlockConfig, mode: DispatchMode) -> u64 {
    cfg.sequence
        .iter()
        .map(|k| dispatches_per_layer(*k, mode) * cfg.layers_per_block as u64)
        .sum()
}

/// What a fusion block saw: how many tokens joined the merged partition,
/// how many passed through untouched, and how many sets mixed modalities
/// (reported for the X-major partition; the Y-major rotation covers the
/// same windows).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FusionReport {
    pub participants: usize,
    pub passthrough: usize,
    pub mixed_sets: usize,
}

/// Count sets whose slots contain tokens of both modalities.
pub fn mixed_set_count(partition: &SetPartition, modality_of: &[Modality]) -> usize {
    let mut mixed = 0;
    for s in 0..partition.num_sets() {
        let mut has_lidar = false;
        let mut has_image = false;
        for k in 0..partition.tau {
            match modality_of[partition.slots[(s, k)] as usize] {
                Modality::Lidar => has_lidar = true,
                Modality::Image => has_image = true,
            }
        }
        if has_lidar && has_image {
            mixed += 1;
        }
    }
    mixed
}

fn layer_order(layer_in_block: usize) -> SetOrder {
    if layer_in_block.is_multiple_of(2) {
        SetOrder::XMajor
    } else {
        SetOrder::YMajor
    }
}

fn gather_batch(
    partition: &SetPartition,
    features: &Array2<f32>,
    coords: &[[i64; 3]],
) -> Result<SetBatch> {
    let (feat, _) = gather(partition, features.view(), coords)?;
    let pe = partition.normalized_coords(coords);
    Ok(SetBatch::new(feat, pe))
}

/// Intra-modal block: lidar sets in 3D voxel space, image sets in per-view
/// 2D space, attended with shared weights. Parallel mode fuses the two set
/// batches into a single dispatch per layer.
pub fn intra_modal_block(
    tokens: &mut TokenSequence,
    weights: &BackboneWeights,
    cfg: &BlockConfig,
    block_idx: usize,
    counter: &DispatchCounter,
    mode: DispatchMode,
) -> Result<()> {
    let n = tokens.lidar_count;
    let lidar_coords: Vec<[i64; 3]> = tokens.coords[..n].to_vec();
    let image_coords: Vec<[i64; 3]> = tokens.coords[n..].to_vec();

    let lidar_parts: Vec<SetPartition> = [SetOrder::XMajor, SetOrder::YMajor]
        .iter()
        .map(|o| dynamic_set_partition(&lidar_coords, &cfg.lidar_spec(), cfg.tau, *o))
        .collect();
    let image_parts: Vec<SetPartition> = [SetOrder::XMajor, SetOrder::YMajor]
        .iter()
        .map(|o| dynamic_set_partition(&image_coords, &cfg.image_spec(), cfg.tau, *o))
        .collect();

    for l in 0..cfg.layers_per_block {
        let layer = block_idx * cfg.layers_per_block + l;
        let oi = (layer_order(l) == SetOrder::YMajor) as usize;
        let lp = &lidar_parts[oi];
        let ip = &image_parts[oi];
        let lidar_feats = tokens.features.slice(ndarray::s![..n, ..]).to_owned();
        let image_feats = tokens.features.slice(ndarray::s![n.., ..]).to_owned();

        let lidar_batch = if n > 0 {
            gather_batch(lp, &lidar_feats, &lidar_coords)?
        } else {
            SetBatch::empty(cfg.tau, weights.channels)
        };
        let image_batch = if image_coords.is_empty() {
            SetBatch::empty(cfg.tau, weights.channels)
        } else {
            gather_batch(ip, &image_feats, &image_coords)?
        };

        let (lidar_out, image_out) = match mode {
            DispatchMode::Parallel => {
                batched_layer_over_modalities(&lidar_batch, &image_batch, weights, layer, counter)?
            }
            DispatchMode::Serial => (
                set_attention_layer(&lidar_batch, weights, layer, counter)?,
                set_attention_layer(&image_batch, weights, layer, counter)?,
            ),
        };

        if n > 0 {
            let new = scatter_canonical_filtered(lp, lidar_out.features.view(), |_| true)?;
            tokens.features.slice_mut(ndarray::s![..n, ..]).assign(&new);
        }
        if !image_coords.is_empty() {
            let new = scatter_canonical_filtered(ip, image_out.features.view(), |_| true)?;
            tokens.features.slice_mut(ndarray::s![n.., ..]).assign(&new);
        }
    }
    Ok(())
}

/// Map every camera-visible lidar token onto the image-token patch lattice
/// via its first view hit, then append all image tokens unchanged. Returns
/// the participating global token indices and their 2D-space coordinates.
pub fn project_tokens_2d(
    tokens: &TokenSequence,
    rig: &CameraRig,
) -> Result<(Vec<usize>, Vec<[i64; 3]>)> {
    let image_meta = tokens
        .image_grid
        .ok_or_else(|| Error::Config("2D fusion needs image tokens' grid metadata".into()))?;
    let n = tokens.lidar_count;

    let mut participants: Vec<usize> = Vec::with_capacity(tokens.len());
    let mut merged_coords: Vec<[i64; 3]> = Vec::with_capacity(tokens.len());
    if n > 0 {
        let grid = tokens
            .lidar_grid
            .ok_or_else(|| Error::Config("lidar tokens lack grid metadata".into()))?;
        let patch = image_meta.patch as f64;
        for t in 0..n {
            let center = grid.voxel_center(tokens.coords[t]);
            if let Some(hit) = project_to_first_hit(center, rig) {
                participants.push(t);
                merged_coords.push([
                    (hit.x / patch).floor() as i64,
                    (hit.y / patch).floor() as i64,
                    hit.view as i64,
                ]);
            }
        }
    }
    for t in n..tokens.len() {
        participants.push(t);
        merged_coords.push(tokens.coords[t]);
    }
    Ok((participants, merged_coords))
}

/// Tokens lifted into 3D voxel space for cross-modal partitioning.
pub struct Lifted3d {
    /// Global indices of participating tokens, all lidar tokens first.
    pub participants: Vec<usize>,
    /// Voxel-lattice coordinates, aligned with `participants`.
    pub coords: Vec<[i64; 3]>,
    /// `(global token, planar distance in pixels)` per lifted image token.
    pub distances: Vec<(usize, f64)>,
}

/// Assign every image token a depth from its nearest virtual image point
/// and unproject it onto the lidar voxel lattice. Tokens with no depth
/// (empty view) or whose unprojection leaves the grid are excluded.
pub fn lift_tokens_3d(
    tokens: &TokenSequence,
    table: &PseudoDepthTable,
    rig: &CameraRig,
) -> Result<Lifted3d> {
    let image_meta = tokens
        .image_grid
        .ok_or_else(|| Error::Config("3D fusion needs image tokens' grid metadata".into()))?;
    let grid = tokens
        .lidar_grid
        .ok_or_else(|| Error::Config("3D fusion needs the lidar voxel grid".into()))?;
    let n = tokens.lidar_count;

    let mut participants: Vec<usize> = (0..n).collect();
    let mut merged_coords: Vec<[i64; 3]> = tokens.coords[..n].to_vec();
    let mut distances: Vec<(usize, f64)> = Vec::new();
    for t in n..tokens.len() {
        let c = tokens.coords[t];
        let view = c[2] as usize;
        let pixel = image_meta.patch_center(c[0], c[1]);
        if let Some((depth, dist)) = crate::geometry::nearest_depth(pixel, view, table) {
            let world = unproject(pixel, view, depth, rig);
            if let Some(voxel) = grid.voxel_of(world) {
                participants.push(t);
                merged_coords.push(voxel);
                distances.push((t, dist));
            }
        }
    }
    Ok(Lifted3d { participants, coords: merged_coords, distances })
}

/// Inter-modal 2D block: lidar tokens are projected to their first camera
/// hit, discretized onto the patch lattice, and partitioned jointly with
/// all image tokens in per-view 2D windows. Lidar tokens invisible to
/// every camera pass through unchanged; token coordinates are restored
/// afterwards by construction since they are never overwritten.
pub fn inter_modal_block_2d(
    tokens: &mut TokenSequence,
    rig: &CameraRig,
    weights: &BackboneWeights,
    cfg: &BlockConfig,
    block_idx: usize,
    counter: &DispatchCounter,
    mode: DispatchMode,
) -> Result<FusionReport> {
    let n = tokens.lidar_count;
    let (participants, merged_coords) = project_tokens_2d(tokens, rig)?;
    let visible_lidar = participants.iter().filter(|t| **t < n).count();

    run_fusion_layers(
        tokens,
        &participants,
        &merged_coords,
        cfg.image_spec(),
        weights,
        cfg,
        block_idx,
        counter,
        mode,
        BlockKind::Inter2d,
    )?;

    let x_part =
        dynamic_set_partition(&merged_coords, &cfg.image_spec(), cfg.tau, SetOrder::XMajor);
    let merged_modality: Vec<Modality> =
        participants.iter().map(|t| tokens.modality[*t]).collect();
    Ok(FusionReport {
        participants: participants.len(),
        passthrough: n - visible_lidar,
        mixed_sets: mixed_set_count(&x_part, &merged_modality),
    })
}

/// Inter-modal 3D block: each image token takes the depth of its nearest
/// virtual image point, unprojects into the lidar voxel lattice, and has
/// its features augmented by the offset MLP of the planar distance; the
/// merged tokens are windowed in 3D voxel space. Image tokens with no
/// depth (empty view, or an unprojection landing outside the grid) pass
/// through unchanged.
#[allow(clippy::too_many_arguments)]
pub fn inter_modal_block_3d(
    tokens: &mut TokenSequence,
    table: &PseudoDepthTable,
    rig: &CameraRig,
    weights: &BackboneWeights,
    cfg: &BlockConfig,
    block_idx: usize,
    counter: &DispatchCounter,
    mode: DispatchMode,
) -> Result<FusionReport> {
    let image_meta = tokens
        .image_grid
        .ok_or_else(|| Error::Config("3D fusion needs image tokens' grid metadata".into()))?;
    let lifted = lift_tokens_3d(tokens, table, rig)?;
    let (participants, merged_coords, distances) =
        (lifted.participants, lifted.coords, lifted.distances);
    let passthrough = tokens.len() - participants.len();

    // Offset features are added once, when the tokens enter 3D space.
    if !distances.is_empty() {
        let input = Array2::from_shape_vec(
            (distances.len(), 1),
            distances
                .iter()
                .map(|(_, d)| if cfg.offset_in_pixels { *d } else { *d / image_meta.patch as f64 })
                .collect(),
        )
        .unwrap();
        let add = weights.offset_mlp.forward_f64(input.view());
        for (row, (t, _)) in distances.iter().enumerate() {
            for c in 0..weights.channels {
                let v = f64::from(tokens.features[(*t, c)]) + add[(row, c)];
                tokens.features[(*t, c)] = v as f32;
            }
        }
    }

    run_fusion_layers(
        tokens,
        &participants,
        &merged_coords,
        cfg.lidar_spec(),
        weights,
        cfg,
        block_idx,
        counter,
        mode,
        BlockKind::Inter3d,
    )?;

    let x_part =
        dynamic_set_partition(&merged_coords, &cfg.lidar_spec(), cfg.tau, SetOrder::XMajor);
    let merged_modality: Vec<Modality> =
        participants.iter().map(|t| tokens.modality[*t]).collect();
    Ok(FusionReport {
        participants: participants.len(),
        passthrough,
        mixed_sets: mixed_set_count(&x_part, &merged_modality),
    })
}

/// Shared layer loop for the two fusion blocks. Serial 2D grouping runs the
/// same merged sets once per modality and writes back only that modality's
/// canonical slots; serial 3D runs a single unified dispatch.
#[allow(clippy::too_many_arguments)]
fn run_fusion_layers(
    tokens: &mut TokenSequence,
    participants: &[usize],
    merged_coords: &[[i64; 3]],
    spec: WindowSpec,
    weights: &BackboneWeights,
    cfg: &BlockConfig,
    block_idx: usize,
    counter: &DispatchCounter,
    mode: DispatchMode,
    kind: BlockKind,
) -> Result<()> {
    if participants.is_empty() {
        return Ok(());
    }
    let parts: Vec<SetPartition> = [SetOrder::XMajor, SetOrder::YMajor]
        .iter()
        .map(|o| dynamic_set_partition(merged_coords, &spec, cfg.tau, *o))
        .collect();

    let c = weights.channels;
    let mut merged = Array2::<f32>::zeros((participants.len(), c));
    for (row, t) in participants.iter().enumerate() {
        merged.row_mut(row).assign(&tokens.features.row(*t));
    }
    let merged_modality: Vec<Modality> =
        participants.iter().map(|t| tokens.modality[*t]).collect();
    let has_lidar = merged_modality.contains(&Modality::Lidar);
    let has_image = merged_modality.contains(&Modality::Image);

    for l in 0..cfg.layers_per_block {
        let layer = block_idx * cfg.layers_per_block + l;
        let part = &parts[(layer_order(l) == SetOrder::YMajor) as usize];
        let batch = gather_batch(part, &merged, merged_coords)?;

        let serial_per_modality = mode == DispatchMode::Serial
            && kind == BlockKind::Inter2d
            && has_lidar
            && has_image;
        merged = if serial_per_modality {
            // Two passes over identical inputs, each serving one modality's
            // write-back; rejected rows are zero so the sum is exact.
            let lidar_pass = set_attention_layer(&batch, weights, layer, counter)?;
            let image_pass = set_attention_layer(&batch, weights, layer, counter)?;
            let a = scatter_canonical_filtered(part, lidar_pass.features.view(), |t| {
                merged_modality[t] == Modality::Lidar
            })?;
            let b = scatter_canonical_filtered(part, image_pass.features.view(), |t| {
                merged_modality[t] == Modality::Image
            })?;
            a + b
        } else {
            let out = set_attention_layer(&batch, weights, layer, counter)?;
            scatter_canonical_filtered(part, out.features.view(), |_| true)?
        };
    }

    for (row, t) in participants.iter().enumerate() {
        tokens.features.row_mut(*t).assign(&merged.row(row));
    }
    Ok(())
}

/// Bird's-eye-view grid of pooled lidar features.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    /// `grid_x x grid_y x channels`.
    pub features: Array3<f32>,
    pub mask: Array2<bool>,
    pub cell_size: [f64; 2],
    pub origin: [f64; 2],
}

impl BevGrid {
    pub fn occupancy(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn to_container(&self) -> TensorContainer {
        let (gx, gy, c) = self.features.dim();
        let mut out = TensorContainer::new();
        out.push(TensorEntry::f32(
            "features",
            vec![gx as u64, gy as u64, c as u64],
            self.features.as_slice().unwrap().to_vec(),
        ));
        out.push(TensorEntry::u8(
            "mask",
            vec![gx as u64, gy as u64],
            self.mask.iter().map(|m| u8::from(*m)).collect(),
        ));
        out.push(TensorEntry::i64("cell_size", vec![2], f64_bits(&self.cell_size)));
        out.push(TensorEntry::i64("origin", vec![2], f64_bits(&self.origin)));
        out
    }
}

/// Scatter each lidar token's feature vector into its (x, y) BEV cell.
/// The pillar configuration guarantees at most one token per cell; a
/// second write to a cell is an error.
pub fn bev_pool(tokens: &TokenSequence) -> Result<BevGrid> {
    let grid = tokens
        .lidar_grid
        .ok_or_else(|| Error::Config("BEV pooling needs the lidar voxel grid".into()))?;
    let (gx, gy) = (grid.dims[0], grid.dims[1]);
    let c = tokens.channels();
    let mut features = Array3::<f32>::zeros((gx, gy, c));
    let mut mask = Array2::<bool>::from_elem((gx, gy), false);
    for t in 0..tokens.lidar_count {
        let (x, y) = tokens.bev_cell(t);
        let (xu, yu) = (x as usize, y as usize);
        if mask[(xu, yu)] {
            return Err(Error::DuplicateCell { x, y });
        }
        mask[(xu, yu)] = true;
        features.slice_mut(ndarray::s![xu, yu, ..]).assign(&tokens.features.row(t));
    }
    Ok(BevGrid {
        features,
        mask,
        cell_size: [grid.cell[0], grid.cell[1]],
        origin: [grid.range.min[0], grid.range.min[1]],
    })
}

/// Everything `run_backbone` needs besides the weights.
pub struct BackboneInputs<'a> {
    pub cloud: &'a PointCloud,
    pub images: &'a ImageStack,
    pub rig: &'a CameraRig,
    pub table: Option<&'a PseudoDepthTable>,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub grid_size: [f64; 3],
    pub range: Box3,
    pub patch: usize,
    pub block: BlockConfig,
    /// Keep a features snapshot after every block.
    pub keep_intermediate: bool,
}

pub struct BackboneRun {
    pub bev: BevGrid,
    pub dispatches: u64,
    pub per_block_dispatches: Vec<u64>,
    pub per_block_millis: Vec<f64>,
    pub fusion_reports: Vec<Option<FusionReport>>,
    pub lidar_tokens: usize,
    pub image_tokens: usize,
    pub intermediate: Vec<Array2<f32>>,
}

/// Tokenize, execute the configured block sequence, and pool the lidar
/// tokens into the BEV grid. Deterministic for fixed weights and inputs.
pub fn run_backbone(
    inputs: &BackboneInputs,
    params: &BackboneParams,
    weights: &BackboneWeights,
    mode: DispatchMode,
) -> Result<BackboneRun> {
    params.block.validate()?;
    let lidar = voxelize(inputs.cloud, params.grid_size, params.range, weights)?;
    let image = patchify(inputs.images, params.patch, weights)?;
    let mut tokens = TokenSequence::merged(lidar, image)?;
    let (n, m) = (tokens.lidar_count, tokens.image_count());

    let counter = DispatchCounter::new();
    let mut per_block_dispatches = Vec::new();
    let mut per_block_millis = Vec::new();
    let mut fusion_reports = Vec::new();
    let mut intermediate = Vec::new();

    for (bi, kind) in params.block.sequence.iter().enumerate() {
        let before = counter.total();
        let start = std::time::Instant::now();
        let report = match kind {
            BlockKind::Intra => {
                intra_modal_block(&mut tokens, weights, &params.block, bi, &counter, mode)?;
                None
            }
            BlockKind::Inter2d => Some(inter_modal_block_2d(
                &mut tokens,
                inputs.rig,
                weights,
                &params.block,
                bi,
                &counter,
                mode,
            )?),
            BlockKind::Inter3d => {
                let table = inputs.table.ok_or_else(|| {
                    Error::Config("block sequence includes inter3d but no depth table given".into())
                })?;
                Some(inter_modal_block_3d(
                    &mut tokens,
                    table,
                    inputs.rig,
                    weights,
                    &params.block,
                    bi,
                    &counter,
                    mode,
                )?)
            }
        };
        per_block_dispatches.push(counter.total() - before);
        per_block_millis.push(start.elapsed().as_secs_f64() * 1e3);
        fusion_reports.push(report);
        if params.keep_intermediate {
            intermediate.push(tokens.features.clone());
        }
    }

    let bev = bev_pool(&tokens)?;
    Ok(BackboneRun {
        bev,
        dispatches: counter.total(),
        per_block_dispatches,
        per_block_millis,
        fusion_reports,
        lidar_tokens: n,
        image_tokens: m,
        intermediate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::WeightsSpec;
    use ndarray::Array4;
    use rand::Rng;

    fn tiny_weights(layers: usize) -> BackboneWeights {
        BackboneWeights::seeded(
            3,
            &WeightsSpec {
                channels: 8,
                hidden: 16,
                heads: 2,
                layers,
                voxel_in_dim: 4,
                patch_in_dim: 12,
            },
        )
    }

    fn tiny_block(sequence: Vec<BlockKind>) -> BlockConfig {
        BlockConfig {
            sequence,
            layers_per_block: 2,
            lidar_window: [4, 4, 1],
            image_window: [4, 4, 1],
            tau: 5,
            offset_in_pixels: false,
        }
    }

    fn tiny_tokens(seed: u64, weights: &BackboneWeights) -> TokenSequence {
        let mut rng = crate::rng::stream(seed, "backbone.test.tokens");
        let xyz: Vec<[f32; 3]> = (0..200)
            .map(|_| {
                [
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let cloud = PointCloud::new(xyz, vec![0.5; 200], 1);
        let range = Box3 { min: [-4.0, -4.0, -1.0], max: [4.0, 4.0, 1.0] };
        let lidar = voxelize(&cloud, [1.0, 1.0, 2.0], range, weights).unwrap();
        let images = ImageStack {
            pixels: Array4::from_shape_fn((2, 8, 8, 3), |_| rng.random_range(0.0..1.0f32)),
        };
        let image = patchify(&images, 2, weights).unwrap();
        TokenSequence::merged(lidar, image).unwrap()
    }

    #[test]
    fn intra_block_conserves_tokens_and_tags() {
        let w = tiny_weights(2);
        let cfg = tiny_block(vec![BlockKind::Intra]);
        let mut tokens = tiny_tokens(1, &w);
        let coords = tokens.coords.clone();
        let tags = tokens.modality.clone();
        let count = tokens.len();
        intra_modal_block(&mut tokens, &w, &cfg, 0, &DispatchCounter::new(), DispatchMode::Parallel)
            .unwrap();
        assert_eq!(tokens.len(), count);
        assert_eq!(tokens.coords, coords);
        assert_eq!(tokens.modality, tags);
    }

    #[test]
    fn intra_block_parallel_vs_serial_dispatches() {
        let w = tiny_weights(2);
        let cfg = tiny_block(vec![BlockKind::Intra]);

        let mut a = tiny_tokens(2, &w);
        let pc = DispatchCounter::new();
        intra_modal_block(&mut a, &w, &cfg, 0, &pc, DispatchMode::Parallel).unwrap();
        assert_eq!(pc.total(), 2);

        let mut b = tiny_tokens(2, &w);
        let sc = DispatchCounter::new();
        intra_modal_block(&mut b, &w, &cfg, 0, &sc, DispatchMode::Serial).unwrap();
        assert_eq!(sc.total(), 4);

        assert_eq!(a.features, b.features);
    }

    #[test]
    fn lidar_empty_intra_reduces_to_image_only() {
        let w = tiny_weights(2);
        let cfg = tiny_block(vec![BlockKind::Intra]);
        let mut rng = crate::rng::stream(7, "backbone.test.imageonly");
        let images = ImageStack {
            pixels: Array4::from_shape_fn((2, 8, 8, 3), |_| rng.random_range(0.0..1.0f32)),
        };
        let image = patchify(&images, 2, &w).unwrap();
        let m = image.len();
        let mut tokens = TokenSequence::merged(TokenSequence::empty(8), image).unwrap();
        let counter = DispatchCounter::new();
        intra_modal_block(&mut tokens, &w, &cfg, 0, &counter, DispatchMode::Parallel).unwrap();
        assert_eq!(tokens.len(), m);
        assert_eq!(counter.total(), 2);
    }

    #[test]
    fn bev_pool_places_single_token() {
        let w = tiny_weights(2);
        let cloud = PointCloud::new(vec![[3.2, 5.4, 0.0]], vec![0.1], 1);
        let range = Box3 { min: [0.0, 0.0, -1.0], max: [8.0, 8.0, 1.0] };
        let tokens = voxelize(&cloud, [1.0, 1.0, 2.0], range, &w).unwrap();
        let bev = bev_pool(&tokens).unwrap();
        assert_eq!(bev.occupancy(), 1);
        assert!(bev.mask[(3, 5)]);
        assert_eq!(
            bev.features.slice(ndarray::s![3, 5, ..]).to_vec(),
            tokens.features.row(0).to_vec()
        );
        assert_eq!(bev.features.slice(ndarray::s![0, 0, ..]).sum(), 0.0);
    }

    #[test]
    fn bev_pool_rejects_duplicate_cells() {
        let w = tiny_weights(2);
        let cloud = PointCloud::new(vec![[1.1, 1.1, 0.0]], vec![0.0], 1);
        let range = Box3 { min: [0.0, 0.0, -1.0], max: [4.0, 4.0, 1.0] };
        let mut tokens = voxelize(&cloud, [1.0, 1.0, 2.0], range, &w).unwrap();
        // Forge a second token in the same pillar cell.
        tokens.coords.push([1, 1, 0]);
        tokens.modality.push(Modality::Lidar);
        tokens.lidar_count += 1;
        let mut features = Array2::zeros((2, 8));
        features.row_mut(0).assign(&tokens.features.row(0));
        tokens.features = features;
        assert!(matches!(bev_pool(&tokens), Err(Error::DuplicateCell { x: 1, y: 1 })));
    }

    #[test]
    fn lidar_only_serial_and_parallel_paths_are_byte_identical() {
        let w = tiny_weights(2);
        let cfg = tiny_block(vec![BlockKind::Intra]);
        let mut rng = crate::rng::stream(9, "backbone.test.lidaronly");
        let xyz: Vec<[f32; 3]> = (0..150)
            .map(|_| {
                [
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let cloud = PointCloud::new(xyz, vec![0.5; 150], 1);
        let range = Box3 { min: [-4.0, -4.0, -1.0], max: [4.0, 4.0, 1.0] };
        let lidar = voxelize(&cloud, [1.0, 1.0, 2.0], range, &w).unwrap();
        let tokens = TokenSequence::merged(lidar, TokenSequence::empty(8)).unwrap();

        let mut a = tokens.clone();
        let pc = DispatchCounter::new();
        intra_modal_block(&mut a, &w, &cfg, 0, &pc, DispatchMode::Parallel).unwrap();
        let mut b = tokens.clone();
        let sc = DispatchCounter::new();
        intra_modal_block(&mut b, &w, &cfg, 0, &sc, DispatchMode::Serial).unwrap();

        // A single modality degenerates both paths to the same dispatches.
        assert_eq!(pc.total(), 2);
        assert_eq!(sc.total(), 2);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn expected_dispatch_table() {
        let cfg = BlockConfig {
            sequence: vec![BlockKind::Intra, BlockKind::Inter2d, BlockKind::Inter2d, BlockKind::Inter3d],
            layers_per_block: 2,
            lidar_window: [30, 30, 1],
            image_window: [30, 30, 1],
            tau: 90,
            offset_in_pixels: false,
        };
        assert_eq!(expected_dispatches(&cfg, DispatchMode::Parallel), 8);
        assert_eq!(expected_dispatches(&cfg, DispatchMode::Serial), 14);
    }
}
