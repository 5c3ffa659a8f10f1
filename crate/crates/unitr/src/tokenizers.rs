//! Tokenizers: raw point clouds and multi-view images become the unified
//! token sequence the backbone consumes.
//!
//! Lidar tokens come from dynamic voxelization with a one-layer point-wise
//! embedding reduced by element-wise max, so the result is independent of
//! point order. Image tokens are non-overlapping patches under a shared
//! linear embedding.

use ndarray::{Array2, Array4};
use serde::Serialize;

use crate::attention::BackboneWeights;
use crate::error::{Error, Result};
use crate::geometry::Box3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Modality {
    Lidar,
    Image,
}

/// Raw lidar returns: xyz in meters plus `extra_dim` extra features per
/// point (e.g. intensity).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub xyz: Vec<[f32; 3]>,
    pub extras: Vec<f32>,
    pub extra_dim: usize,
}

impl PointCloud {
    pub fn new(xyz: Vec<[f32; 3]>, extras: Vec<f32>, extra_dim: usize) -> Self {
        assert_eq!(extras.len(), xyz.len() * extra_dim);
        Self { xyz, extras, extra_dim }
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    /// Flat binary record format: x, y, z, extras as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * (3 + self.extra_dim) * 4);
        for (i, p) in self.xyz.iter().enumerate() {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for k in 0..self.extra_dim {
                out.extend_from_slice(&self.extras[i * self.extra_dim + k].to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], extra_dim: usize) -> Result<Self> {
        let stride = (3 + extra_dim) * 4;
        if !bytes.len().is_multiple_of(stride) {
            return Err(Error::BadShape(format!(
                "point record length {} not a multiple of {stride}",
                bytes.len()
            )));
        }
        let n = bytes.len() / stride;
        let mut xyz = Vec::with_capacity(n);
        let mut extras = Vec::with_capacity(n * extra_dim);
        for rec in bytes.chunks_exact(stride) {
            let f = |o: usize| f32::from_le_bytes(rec[o * 4..o * 4 + 4].try_into().unwrap());
            xyz.push([f(0), f(1), f(2)]);
            for k in 0..extra_dim {
                extras.push(f(3 + k));
            }
        }
        Ok(Self { xyz, extras, extra_dim })
    }
}

/// Multi-view RGB images, `views x height x width x 3`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    pub pixels: Array4<f32>,
}

impl ImageStack {
    pub fn views(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Voxel lattice the lidar tokens live on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarGridMeta {
    pub range: Box3,
    pub cell: [f64; 3],
    pub dims: [usize; 3],
}

impl LidarGridMeta {
    /// World-space center of a voxel.
    pub fn voxel_center(&self, idx: [i64; 3]) -> [f64; 3] {
        [
            self.range.min[0] + (idx[0] as f64 + 0.5) * self.cell[0],
            self.range.min[1] + (idx[1] as f64 + 0.5) * self.cell[1],
            self.range.min[2] + (idx[2] as f64 + 0.5) * self.cell[2],
        ]
    }

    /// Voxel index of a world point, if it falls inside the grid.
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<[i64; 3]> {
        let mut idx = [0i64; 3];
        for a in 0..3 {
            let i = ((p[a] - self.range.min[a]) / self.cell[a]).floor();
            if i < 0.0 || i >= self.dims[a] as f64 || p[a] >= self.range.max[a] {
                return None;
            }
            idx[a] = i as i64;
        }
        Some(idx)
    }
}

/// Patch lattice the image tokens live on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageGridMeta {
    pub patch: usize,
    pub views: usize,
    /// (columns, rows) of the per-view token grid.
    pub grid: (usize, usize),
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
}

impl ImageGridMeta {
    /// Pixel-space center of a patch cell.
    pub fn patch_center(&self, col: i64, row: i64) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.patch as f64,
            (row as f64 + 0.5) * self.patch as f64,
        )
    }
}

/// Coordinates plus features plus modality tags for a batch of sparse
/// tokens. Lidar tokens come first; their (x, y) voxel index doubles as
/// the BEV cell index.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `count x channels`.
    pub features: Array2<f32>,
    /// Lidar: voxel grid index (x, y, z). Image: (patch col, patch row, view).
    pub coords: Vec<[i64; 3]>,
    pub modality: Vec<Modality>,
    pub lidar_count: usize,
    pub lidar_grid: Option<LidarGridMeta>,
    pub image_grid: Option<ImageGridMeta>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn image_count(&self) -> usize {
        self.len() - self.lidar_count
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    /// BEV cell of a lidar token.
    pub fn bev_cell(&self, token: usize) -> (i64, i64) {
        debug_assert!(token < self.lidar_count);
        (self.coords[token][0], self.coords[token][1])
    }

    pub fn empty(channels: usize) -> Self {
        Self {
            features: Array2::zeros((0, channels)),
            coords: Vec::new(),
            modality: Vec::new(),
            lidar_count: 0,
            lidar_grid: None,
            image_grid: None,
        }
    }

    /// Concatenate the lidar part and the image part into one sequence.
    pub fn merged(lidar: TokenSequence, image: TokenSequence) -> Result<TokenSequence> {
        if !lidar.is_empty() && !image.is_empty() && lidar.channels() != image.channels() {
            return Err(Error::ShapeMismatch(format!(
                "channel mismatch {} vs {}",
                lidar.channels(),
                image.channels()
            )));
        }
        debug_assert_eq!(lidar.lidar_count, lidar.len());
        debug_assert_eq!(image.lidar_count, 0);
        let channels = if lidar.is_empty() { image.channels() } else { lidar.channels() };
        let mut features = Array2::zeros((lidar.len() + image.len(), channels));
        features.slice_mut(ndarray::s![..lidar.len(), ..]).assign(&lidar.features);
        features.slice_mut(ndarray::s![lidar.len().., ..]).assign(&image.features);
        let mut coords = lidar.coords;
        coords.extend_from_slice(&image.coords);
        let mut modality = lidar.modality;
        modality.extend_from_slice(&image.modality);
        Ok(TokenSequence {
            features,
            coords,
            modality,
            lidar_count: lidar.lidar_count,
            lidar_grid: lidar.lidar_grid,
            image_grid: image.image_grid,
        })
    }
}

/// Dynamic voxelization: each in-range point lands in a voxel by floor
/// division; per voxel, a point-wise linear embedding of (centered
/// coordinates ++ extras) reduces by element-wise max into one token.
/// Tokens are emitted in (z, y, x) voxel order.
pub fn voxelize(
    cloud: &PointCloud,
    grid_size: [f64; 3],
    range: Box3,
    weights: &BackboneWeights,
) -> Result<TokenSequence> {
    if grid_size.iter().any(|g| *g <= 0.0) {
        return Err(Error::BadShape("grid size must be positive".into()));
    }
    if range.is_degenerate() {
        return Err(Error::BadShape("voxel range is degenerate".into()));
    }
    let in_dim = 3 + cloud.extra_dim;
    if weights.voxel_embed.in_dim() != in_dim {
        return Err(Error::ShapeMismatch(format!(
            "voxel embedding expects {} inputs, cloud provides {in_dim}",
            weights.voxel_embed.in_dim()
        )));
    }
    let ext = range.extent();
    let dims = [
        (ext[0] / grid_size[0] - 1e-9).ceil() as usize,
        (ext[1] / grid_size[1] - 1e-9).ceil() as usize,
        (ext[2] / grid_size[2] - 1e-9).ceil() as usize,
    ];
    let meta = LidarGridMeta { range, cell: grid_size, dims };

    let mut buckets: std::collections::HashMap<[i64; 3], Vec<usize>> =
        std::collections::HashMap::new();
    for (i, p) in cloud.xyz.iter().enumerate() {
        let world = [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])];
        if let Some(idx) = meta.voxel_of(world) {
            buckets.entry(idx).or_default().push(i);
        }
    }
    if buckets.is_empty() {
        return Err(Error::EmptyCloud);
    }

    let mut voxels: Vec<[i64; 3]> = buckets.keys().copied().collect();
    voxels.sort_by_key(|v| (v[2], v[1], v[0]));

    let c = weights.channels;
    let mut features = Array2::<f32>::zeros((voxels.len(), c));
    let mut input = Array2::<f64>::zeros((1, in_dim));
    for (row, voxel) in voxels.iter().enumerate() {
        let center = meta.voxel_center(*voxel);
        let mut acc = vec![f64::NEG_INFINITY; c];
        for point in &buckets[voxel] {
            let p = cloud.xyz[*point];
            input[(0, 0)] = f64::from(p[0]) - center[0];
            input[(0, 1)] = f64::from(p[1]) - center[1];
            input[(0, 2)] = f64::from(p[2]) - center[2];
            for k in 0..cloud.extra_dim {
                input[(0, 3 + k)] = f64::from(cloud.extras[point * cloud.extra_dim + k]);
            }
            let emb = weights.voxel_embed.forward_f64(input.view());
            for (a, e) in acc.iter_mut().zip(emb.iter()) {
                *a = a.max(*e);
            }
        }
        for (col, a) in acc.iter().enumerate() {
            features[(row, col)] = *a as f32;
        }
    }

    let count = voxels.len();
    Ok(TokenSequence {
        features,
        coords: voxels,
        modality: vec![Modality::Lidar; count],
        lidar_count: count,
        lidar_grid: Some(meta),
        image_grid: None,
    })
}

/// Flatten every non-overlapping `patch x patch` patch into a raw
/// `patch*patch*3` row, in (view, row, col) token order. Within a patch the
/// layout is (pixel row, pixel col, channel).
pub fn raw_patches(
    images: &ImageStack,
    patch: usize,
) -> Result<(Array2<f64>, Vec<[i64; 3]>, ImageGridMeta)> {
    let (views, height, width, rgb) = images.pixels.dim();
    if rgb != 3 {
        return Err(Error::BadShape(format!("expected RGB images, got {rgb} channels")));
    }
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::BadShape(format!(
            "image {height}x{width} not divisible by patch {patch}"
        )));
    }
    let rows = height / patch;
    let cols = width / patch;
    let count = views * rows * cols;
    let raw_dim = patch * patch * 3;

    let mut raw = Array2::<f64>::zeros((count, raw_dim));
    let mut coords = Vec::with_capacity(count);
    let mut token = 0usize;
    for b in 0..views {
        for r in 0..rows {
            for col in 0..cols {
                let mut d = 0usize;
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..3 {
                            raw[(token, d)] =
                                f64::from(images.pixels[(b, r * patch + py, col * patch + px, ch)]);
                            d += 1;
                        }
                    }
                }
                coords.push([col as i64, r as i64, b as i64]);
                token += 1;
            }
        }
    }
    let meta = ImageGridMeta { patch, views, grid: (cols, rows), image_size: (height, width) };
    Ok((raw, coords, meta))
}

/// Split each view into non-overlapping `patch x patch` patches, flatten
/// the raw RGB into a `patch*patch*3` vector, and embed to C. Token
/// coordinates are (patch column, patch row, view id).
pub fn patchify(
    images: &ImageStack,
    patch: usize,
    weights: &BackboneWeights,
) -> Result<TokenSequence> {
    let (raw, coords, meta) = raw_patches(images, patch)?;
    if weights.patch_embed.in_dim() != raw.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "patch embedding expects {} inputs, patches provide {}",
            weights.patch_embed.in_dim(),
            raw.ncols()
        )));
    }
    let emb = weights.patch_embed.forward_f64(raw.view());
    let features = emb.mapv(|v| v as f32);
    let count = coords.len();

    Ok(TokenSequence {
        features,
        coords,
        modality: vec![Modality::Image; count],
        lidar_count: 0,
        lidar_grid: None,
        image_grid: Some(meta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::WeightsSpec;
    use ndarray::Array4;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn weights() -> BackboneWeights {
        BackboneWeights::seeded(
            5,
            &WeightsSpec {
                channels: 8,
                hidden: 16,
                heads: 2,
                layers: 1,
                voxel_in_dim: 4,
                patch_in_dim: 12,
            },
        )
    }

    fn unit_range() -> Box3 {
        Box3 { min: [0.0, 0.0, 0.0], max: [3.0, 3.0, 8.0] }
    }

    #[test]
    fn single_point_lands_in_floor_voxel() {
        let cloud = PointCloud::new(vec![[0.15, 0.15, 0.0]], vec![0.5], 1);
        let seq = voxelize(&cloud, [0.3, 0.3, 8.0], unit_range(), &weights()).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.coords[0], [0, 0, 0]);
        assert_eq!(seq.lidar_grid.unwrap().dims, [10, 10, 1]);
    }

    #[test]
    fn two_points_reduce_by_elementwise_max() {
        let w = weights();
        let cloud = PointCloud::new(vec![[0.1, 0.1, 1.0], [0.2, 0.25, 2.0]], vec![0.2, 0.9], 1);
        let seq = voxelize(&cloud, [0.3, 0.3, 8.0], unit_range(), &w).unwrap();
        assert_eq!(seq.len(), 1);
        // Element-wise max of the two embedded, centered points.
        let meta = seq.lidar_grid.unwrap();
        let center = meta.voxel_center([0, 0, 0]);
        // Inputs must pass through f32 exactly like the stored cloud.
        let embed = |p: [f32; 3], e: f32| {
            let x = ndarray::Array2::from_shape_vec(
                (1, 4),
                vec![
                    f64::from(p[0]) - center[0],
                    f64::from(p[1]) - center[1],
                    f64::from(p[2]) - center[2],
                    f64::from(e),
                ],
            )
            .unwrap();
            w.voxel_embed.forward_f64(x.view())
        };
        let a = embed([0.1, 0.1, 1.0], 0.2);
        let b = embed([0.2, 0.25, 2.0], 0.9);
        for i in 0..8 {
            let want = a[(0, i)].max(b[(0, i)]) as f32;
            assert_eq!(seq.features[(0, i)], want);
        }
    }

    #[test]
    fn out_of_range_cloud_is_an_error() {
        let cloud = PointCloud::new(vec![[99.0, 0.0, 0.0]], vec![0.0], 1);
        let err = voxelize(&cloud, [0.3, 0.3, 8.0], unit_range(), &weights());
        assert!(matches!(err, Err(Error::EmptyCloud)));
    }

    #[test]
    fn voxelization_is_order_invariant() {
        let mut rng = crate::rng::stream(30, "tokenizers.test.order");
        let n = 500;
        let xyz: Vec<[f32; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..8.0),
                ]
            })
            .collect();
        let extras: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let cloud = PointCloud::new(xyz.clone(), extras.clone(), 1);

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let shuffled = PointCloud::new(
            order.iter().map(|i| xyz[*i]).collect(),
            order.iter().map(|i| extras[*i]).collect(),
            1,
        );

        let w = weights();
        let a = voxelize(&cloud, [0.3, 0.3, 8.0], unit_range(), &w).unwrap();
        let b = voxelize(&shuffled, [0.3, 0.3, 8.0], unit_range(), &w).unwrap();
        assert_eq!(a.coords, b.coords);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn token_count_matches_hashset_oracle() {
        let mut rng = crate::rng::stream(31, "tokenizers.test.count");
        let xyz: Vec<[f32; 3]> = (0..800)
            .map(|_| {
                [
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..8.0),
                ]
            })
            .collect();
        let cloud = PointCloud::new(xyz.clone(), vec![0.0; 800], 1);
        let seq = voxelize(&cloud, [0.3, 0.3, 8.0], unit_range(), &weights()).unwrap();
        let mut cells = std::collections::HashSet::new();
        for p in &xyz {
            cells.insert((
                (p[0] / 0.3).floor() as i64,
                (p[1] / 0.3).floor() as i64,
                (p[2] / 8.0).floor() as i64,
            ));
        }
        assert_eq!(seq.len(), cells.len());
    }

    #[test]
    fn patch_grid_shapes_follow_divisibility() {
        let images = ImageStack { pixels: Array4::zeros((2, 16, 24, 3)) };
        let seq = patchify(&images, 2, &weights()).unwrap();
        let meta = seq.image_grid.unwrap();
        assert_eq!(meta.grid, (12, 8));
        assert_eq!(seq.len(), 2 * 8 * 12);
        assert!(matches!(
            patchify(&images, 5, &weights()),
            Err(Error::BadShape(_))
        ));
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let images = ImageStack { pixels: Array4::from_elem((1, 4, 6, 3), 0.25) };
        let seq = patchify(&images, 2, &weights()).unwrap();
        let first = seq.features.row(0).to_owned();
        for r in 1..seq.len() {
            assert_eq!(seq.features.row(r), first.view());
        }
    }

    #[test]
    fn patchify_is_a_pixel_bijection() {
        let mut rng = crate::rng::stream(32, "tokenizers.test.bijection");
        let pixels = Array4::from_shape_fn((2, 8, 12, 3), |_| rng.random_range(0.0..1.0f32));
        let images = ImageStack { pixels: pixels.clone() };
        let patch = 4;
        let (raw, coords, _) = raw_patches(&images, patch).unwrap();
        // Reassemble the raw patch vectors back into an image; exact
        // equality means (token, within-patch offset) <-> pixel is a
        // bijection.
        let mut rebuilt = Array4::<f32>::from_elem(pixels.dim(), f32::NAN);
        for (t, c) in coords.iter().enumerate() {
            let (col, row, b) = (c[0] as usize, c[1] as usize, c[2] as usize);
            let mut d = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..3 {
                        let dst = &mut rebuilt[(b, row * patch + py, col * patch + px, ch)];
                        assert!(dst.is_nan(), "pixel written twice");
                        *dst = raw[(t, d)] as f32;
                        d += 1;
                    }
                }
            }
        }
        assert_eq!(rebuilt, pixels);
    }

    #[test]
    fn merged_sequence_keeps_lidar_first() {
        let w = weights();
        let cloud = PointCloud::new(vec![[0.1, 0.1, 1.0]], vec![0.0], 1);
        let lidar = voxelize(&cloud, [0.3, 0.3, 8.0], unit_range(), &w).unwrap();
        let images = ImageStack { pixels: Array4::zeros((1, 4, 4, 3)) };
        let image = patchify(&images, 2, &w).unwrap();
        let merged = TokenSequence::merged(lidar, image).unwrap();
        assert_eq!(merged.lidar_count, 1);
        assert_eq!(merged.len(), 1 + 4);
        assert_eq!(merged.modality[0], Modality::Lidar);
        assert_eq!(merged.modality[1], Modality::Image);
        assert_eq!(merged.bev_cell(0), (0, 0));
    }

    #[test]
    fn cloud_binary_roundtrip() {
        let cloud = PointCloud::new(
            vec![[1.0, -2.0, 3.5], [0.25, 0.5, -0.75]],
            vec![0.1, 0.9],
            1,
        );
        let back = PointCloud::from_bytes(&cloud.to_bytes(), 1).unwrap();
        assert_eq!(cloud, back);
        assert!(PointCloud::from_bytes(&[0u8; 7], 1).is_err());
    }
}
