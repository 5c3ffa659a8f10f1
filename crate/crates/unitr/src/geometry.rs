//! Camera rig representation and view transformations: LiDAR-to-camera
//! first-hit projection, pseudo-grid depth table construction,
//! nearest-neighbor depth lookup, and camera-to-world unprojection.
//!
//! All operations are pure functions over immutable inputs. A built
//! [`PseudoDepthTable`] is immutable and shareable across threads.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::container::{f64_bits, f64_from_bits, TensorContainer, TensorData, TensorEntry};

/// Camera-frame depths at or below this are treated as invisible; it keeps
/// grazing projections from dividing by a vanishing z.
pub const DEPTH_EPS: f64 = 1e-6;

/// Pixel extent of one bucket in the per-view nearest-neighbor index.
const BUCKET_PIXELS: f64 = 16.0;

/// Axis-aligned box in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn is_degenerate(&self) -> bool {
        self.extent().iter().any(|e| *e <= 0.0)
    }
}

/// One camera: intrinsics in pixels, world-to-camera rigid extrinsics in
/// meters, image size as (height, width).
#[derive(Debug, Clone)]
pub struct CameraView {
    pub intrinsics: Matrix3<f64>,
    pub extrinsics: Matrix4<f64>,
    pub image_size: (usize, usize),
    inv_intrinsics: Matrix3<f64>,
    cam_to_world: Matrix4<f64>,
}

impl CameraView {
    pub fn new(
        intrinsics: Matrix3<f64>,
        extrinsics: Matrix4<f64>,
        image_size: (usize, usize),
    ) -> Result<Self> {
        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 {
            return Err(Error::Config("intrinsics need positive focal lengths".into()));
        }
        let rot = extrinsics.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho_err = (rot.transpose() * rot - Matrix3::identity()).abs().max();
        if ortho_err > 1e-9 {
            return Err(Error::Config(format!(
                "extrinsic rotation not orthonormal (err {ortho_err:.2e})"
            )));
        }
        if (rot.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("extrinsic rotation must have det +1".into()));
        }
        let bottom = extrinsics.row(3);
        if bottom != Vector4::new(0.0, 0.0, 0.0, 1.0).transpose() {
            return Err(Error::Config("extrinsic bottom row must be (0,0,0,1)".into()));
        }
        let inv_intrinsics = intrinsics
            .try_inverse()
            .ok_or_else(|| Error::Config("intrinsics not invertible".into()))?;
        // Rigid inverse: [R t]^-1 = [R^T  -R^T t].
        let t = extrinsics.fixed_view::<3, 1>(0, 3).into_owned();
        let rt = rot.transpose();
        let mut cam_to_world = Matrix4::identity();
        cam_to_world.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        cam_to_world.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-rt * t));
        Ok(Self { intrinsics, extrinsics, image_size, inv_intrinsics, cam_to_world })
    }

    /// Project a world point; `Some((x, y, depth))` when it lands inside the
    /// image with camera-frame depth above [`DEPTH_EPS`].
    pub fn project(&self, world: [f64; 3]) -> Option<(f64, f64, f64)> {
        let p = Vector4::new(world[0], world[1], world[2], 1.0);
        let cam = self.extrinsics * p;
        let depth = cam.z;
        if depth <= DEPTH_EPS {
            return None;
        }
        let h = self.intrinsics * Vector3::new(cam.x, cam.y, cam.z);
        let x = h.x / h.z;
        let y = h.y / h.z;
        let (height, width) = self.image_size;
        if x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64 {
            Some((x, y, depth))
        } else {
            None
        }
    }

    /// World-frame point at depth `d` along the ray through pixel `(x, y)`.
    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> [f64; 3] {
        let ray = self.inv_intrinsics * Vector3::new(x, y, 1.0);
        let cam = ray * (depth / ray.z);
        let w = self.cam_to_world * Vector4::new(cam.x, cam.y, cam.z, 1.0);
        [w.x, w.y, w.z]
    }
}

/// An ordered list of cameras. View indices define the first-hit order.
#[derive(Debug, Clone)]
pub struct CameraRig {
    pub views: Vec<CameraView>,
}

impl CameraRig {
    pub fn new(views: Vec<CameraView>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Config("rig needs at least one view".into()));
        }
        Ok(Self { views })
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    /// SHA-256 over all view parameters; stored in cached tables so a stale
    /// cache never silently serves a different rig.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in &self.views {
            for r in 0..3 {
                for c in 0..3 {
                    h.update(v.intrinsics[(r, c)].to_le_bytes());
                }
            }
            for r in 0..4 {
                for c in 0..4 {
                    h.update(v.extrinsics[(r, c)].to_le_bytes());
                }
            }
            h.update((v.image_size.0 as u64).to_le_bytes());
            h.update((v.image_size.1 as u64).to_le_bytes());
        }
        h.finalize().into()
    }
}

/// A projected point on one view's image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePlanePoint {
    pub x: f64,
    pub y: f64,
    pub view: usize,
    pub depth: f64,
}

/// Scan views in index order and return the first in which the point is
/// visible. Invisibility is a valid absent result, not an error.
pub fn project_to_first_hit(coords: [f64; 3], rig: &CameraRig) -> Option<ImagePlanePoint> {
    for (view, cam) in rig.views.iter().enumerate() {
        if let Some((x, y, depth)) = cam.project(coords) {
            return Some(ImagePlanePoint { x, y, view, depth });
        }
    }
    None
}

/// Per-view uniform pixel-bucket index in CSR form.
#[derive(Debug, Clone)]
struct ViewIndex {
    nx: usize,
    ny: usize,
    offsets: Vec<u32>,
    point_ids: Vec<u32>,
}

impl ViewIndex {
    fn bucket_of(&self, x: f64, y: f64) -> (usize, usize) {
        let bx = ((x / BUCKET_PIXELS) as usize).min(self.nx - 1);
        let by = ((y / BUCKET_PIXELS) as usize).min(self.ny - 1);
        (bx, by)
    }
}

/// Pre-computed projections of a fixed 3D grid into every camera view,
/// with per-view spatial indices for nearest-neighbor depth queries.
#[derive(Debug, Clone)]
pub struct PseudoDepthTable {
    pub grid_shape: [usize; 3],
    pub range: Box3,
    pub rig_hash: [u8; 32],
    pub image_sizes: Vec<(usize, usize)>,
    px: Vec<f64>,
    py: Vec<f64>,
    depth: Vec<f64>,
    view: Vec<u32>,
    indices: Vec<ViewIndex>,
}

/// Generate cell-center points of the `grid_shape` grid over `range` and
/// project each into every view independently; a grid point may appear in
/// multiple views. Only in-bounds projections with positive depth are kept.
pub fn build_pseudo_depth_table(
    grid_shape: [usize; 3],
    range: Box3,
    rig: &CameraRig,
) -> Result<PseudoDepthTable> {
    if grid_shape.contains(&0) {
        return Err(Error::Config("grid_shape must be positive in all axes".into()));
    }
    if range.is_degenerate() {
        return Err(Error::Config("range box is degenerate".into()));
    }
    let [nl, nw, nh] = grid_shape;
    let ext = range.extent();
    let cell = [ext[0] / nl as f64, ext[1] / nw as f64, ext[2] / nh as f64];
    let total = nl * nw * nh;

    // Cells in (x, y, z) row-major order, each projected into views in
    // index order; chunked so the concatenation order is independent of
    // thread scheduling.
    let chunk = 1 << 15;
    let parts: Vec<Vec<(f64, f64, f64, u32)>> = (0..total.div_ceil(chunk))
        .into_par_iter()
        .map(|ci| {
            let mut out = Vec::new();
            for flat in ci * chunk..((ci + 1) * chunk).min(total) {
                let k = flat % nh;
                let j = (flat / nh) % nw;
                let i = flat / (nh * nw);
                let center = [
                    range.min[0] + (i as f64 + 0.5) * cell[0],
                    range.min[1] + (j as f64 + 0.5) * cell[1],
                    range.min[2] + (k as f64 + 0.5) * cell[2],
                ];
                for (b, cam) in rig.views.iter().enumerate() {
                    if let Some((x, y, d)) = cam.project(center) {
                        out.push((x, y, d, b as u32));
                    }
                }
            }
            out
        })
        .collect();

    let count: usize = parts.iter().map(Vec::len).sum();
    let mut px = Vec::with_capacity(count);
    let mut py = Vec::with_capacity(count);
    let mut depth = Vec::with_capacity(count);
    let mut view = Vec::with_capacity(count);
    for part in parts {
        for (x, y, d, b) in part {
            px.push(x);
            py.push(y);
            depth.push(d);
            view.push(b);
        }
    }
    assert!(count <= u32::MAX as usize, "pseudo depth table exceeds u32 indexing");

    let image_sizes: Vec<(usize, usize)> = rig.views.iter().map(|v| v.image_size).collect();
    let indices = build_view_indices(&image_sizes, &px, &py, &view);
    Ok(PseudoDepthTable {
        grid_shape,
        range,
        rig_hash: rig.hash(),
        image_sizes,
        px,
        py,
        depth,
        view,
        indices,
    })
}

fn build_view_indices(
    image_sizes: &[(usize, usize)],
    px: &[f64],
    py: &[f64],
    view: &[u32],
) -> Vec<ViewIndex> {
    image_sizes
        .iter()
        .enumerate()
        .map(|(b, (h, w))| {
            let nx = (*w as f64 / BUCKET_PIXELS).ceil().max(1.0) as usize;
            let ny = (*h as f64 / BUCKET_PIXELS).ceil().max(1.0) as usize;
            let mut counts = vec![0u32; nx * ny + 1];
            let bucket = |x: f64, y: f64| {
                let bx = ((x / BUCKET_PIXELS) as usize).min(nx - 1);
                let by = ((y / BUCKET_PIXELS) as usize).min(ny - 1);
                by * nx + bx
            };
            for i in 0..px.len() {
                if view[i] as usize == b {
                    counts[bucket(px[i], py[i]) + 1] += 1;
                }
            }
            for i in 1..counts.len() {
                counts[i] += counts[i - 1];
            }
            let offsets = counts.clone();
            let mut cursor = offsets.clone();
            let mut point_ids = vec![0u32; *offsets.last().unwrap() as usize];
            // Global order within each bucket, so index ties resolve to the
            // lowest point index exactly like the exhaustive scan.
            for i in 0..px.len() {
                if view[i] as usize == b {
                    let bkt = bucket(px[i], py[i]);
                    point_ids[cursor[bkt] as usize] = i as u32;
                    cursor[bkt] += 1;
                }
            }
            ViewIndex { nx, ny, offsets, point_ids }
        })
        .collect()
}

impl PseudoDepthTable {
    /// Number of stored virtual image points.
    pub fn len(&self) -> usize {
        self.px.len()
    }

    pub fn is_empty(&self) -> bool {
        self.px.is_empty()
    }

    pub fn view_count(&self) -> usize {
        self.image_sizes.len()
    }

    pub fn points_in_view(&self, view: usize) -> usize {
        self.indices[view].point_ids.len()
    }

    /// Views with zero valid projections; they cannot serve depth queries.
    pub fn empty_views(&self) -> Vec<usize> {
        (0..self.view_count()).filter(|v| self.points_in_view(*v) == 0).collect()
    }

    pub fn point(&self, id: usize) -> ImagePlanePoint {
        ImagePlanePoint {
            x: self.px[id],
            y: self.py[id],
            view: self.view[id] as usize,
            depth: self.depth[id],
        }
    }

    /// Iterate `(global_id, point)` for one view in ascending id order.
    pub fn view_points(&self, view: usize) -> impl Iterator<Item = (usize, ImagePlanePoint)> + '_ {
        self.indices[view]
            .point_ids
            .iter()
            .map(move |id| (*id as usize, self.point(*id as usize)))
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        let nu = self.len() as u64;
        c.push(TensorEntry::i64(
            "grid_shape",
            vec![3],
            self.grid_shape.iter().map(|d| *d as i64).collect(),
        ));
        let mut range = self.range.min.to_vec();
        range.extend_from_slice(&self.range.max);
        c.push(TensorEntry::i64("range", vec![6], f64_bits(&range)));
        c.push(TensorEntry::u8("rig_hash", vec![32], self.rig_hash.to_vec()));
        let mut sizes = Vec::new();
        for (h, w) in &self.image_sizes {
            sizes.push(*h as i64);
            sizes.push(*w as i64);
        }
        c.push(TensorEntry::i64("image_sizes", vec![self.image_sizes.len() as u64, 2], sizes));
        c.push(TensorEntry::i64("point_x", vec![nu], f64_bits(&self.px)));
        c.push(TensorEntry::i64("point_y", vec![nu], f64_bits(&self.py)));
        c.push(TensorEntry::i64("point_depth", vec![nu], f64_bits(&self.depth)));
        c.push(TensorEntry::i64(
            "point_view",
            vec![nu],
            self.view.iter().map(|v| *v as i64).collect(),
        ));
        c
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes()
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let geti = |name: &str| -> Result<&Vec<i64>> {
            match &c.get(name).ok_or_else(|| Error::Container(format!("missing `{name}`")))?.data {
                TensorData::I64(v) => Ok(v),
                _ => Err(Error::Container(format!("`{name}` has wrong dtype"))),
            }
        };
        let gs = geti("grid_shape")?;
        let grid_shape = [gs[0] as usize, gs[1] as usize, gs[2] as usize];
        let range_bits = f64_from_bits(geti("range")?);
        let range = Box3 {
            min: [range_bits[0], range_bits[1], range_bits[2]],
            max: [range_bits[3], range_bits[4], range_bits[5]],
        };
        let rig_hash: [u8; 32] = match &c.get("rig_hash").ok_or_else(|| Error::Container("missing `rig_hash`".into()))?.data {
            TensorData::U8(v) if v.len() == 32 => v.as_slice().try_into().unwrap(),
            _ => return Err(Error::Container("`rig_hash` must be 32 bytes".into())),
        };
        let sizes = geti("image_sizes")?;
        let image_sizes: Vec<(usize, usize)> =
            sizes.chunks(2).map(|c| (c[0] as usize, c[1] as usize)).collect();
        let px = f64_from_bits(geti("point_x")?);
        let py = f64_from_bits(geti("point_y")?);
        let depth = f64_from_bits(geti("point_depth")?);
        let view: Vec<u32> = geti("point_view")?.iter().map(|v| *v as u32).collect();
        if px.len() != py.len() || px.len() != depth.len() || px.len() != view.len() {
            return Err(Error::Container("point arrays disagree in length".into()));
        }
        let indices = build_view_indices(&image_sizes, &px, &py, &view);
        Ok(Self { grid_shape, range, rig_hash, image_sizes, px, py, depth, view, indices })
    }
}

/// Depth of the Euclidean-nearest virtual point within the same view, plus
/// the 2D pixel distance to it. `None` when the view holds no points.
/// Equal distances resolve to the lowest stored point index.
pub fn nearest_depth(pixel: (f64, f64), view: usize, table: &PseudoDepthTable) -> Option<(f64, f64)> {
    let idx = &table.indices[view];
    if idx.point_ids.is_empty() {
        return None;
    }
    let (qx, qy) = pixel;
    let (qbx, qby) = idx.bucket_of(qx, qy);
    let r_max = qbx
        .max(idx.nx - 1 - qbx)
        .max(qby.max(idx.ny - 1 - qby));

    let mut best_d2 = f64::INFINITY;
    let mut best_id = u32::MAX;
    for r in 0..=r_max {
        if r >= 1 {
            // Any point in ring r is at least (r-1) full buckets away.
            let lower = (r - 1) as f64 * BUCKET_PIXELS;
            if best_d2.is_finite() && lower * lower > best_d2 {
                break;
            }
        }
        visit_ring(idx, qbx, qby, r, |bucket| {
            let lo = idx.offsets[bucket] as usize;
            let hi = idx.offsets[bucket + 1] as usize;
            for id in &idx.point_ids[lo..hi] {
                let i = *id as usize;
                let dx = table.px[i] - qx;
                let dy = table.py[i] - qy;
                let d2 = dx * dx + dy * dy;
                if d2 < best_d2 || (d2 == best_d2 && *id < best_id) {
                    best_d2 = d2;
                    best_id = *id;
                }
            }
        });
    }
    Some((table.depth[best_id as usize], best_d2.sqrt()))
}

fn visit_ring(idx: &ViewIndex, qbx: usize, qby: usize, r: usize, mut f: impl FnMut(usize)) {
    let (qbx, qby, r) = (qbx as i64, qby as i64, r as i64);
    let (nx, ny) = (idx.nx as i64, idx.ny as i64);
    let mut visit = |bx: i64, by: i64| {
        if bx >= 0 && bx < nx && by >= 0 && by < ny {
            f((by * nx + bx) as usize);
        }
    };
    if r == 0 {
        visit(qbx, qby);
        return;
    }
    for bx in qbx - r..=qbx + r {
        visit(bx, qby - r);
        visit(bx, qby + r);
    }
    for by in qby - r + 1..=qby + r - 1 {
        visit(qbx - r, by);
        visit(qbx + r, by);
    }
}

/// Invert intrinsics then extrinsics to return the world-frame point at
/// depth `d` along the pixel ray of view `b`.
pub fn unproject(pixel: (f64, f64), view: usize, depth: f64, rig: &CameraRig) -> [f64; 3] {
    debug_assert!(depth > 0.0);
    rig.views[view].unproject(pixel.0, pixel.1, depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn pinhole_identity(size: (usize, usize)) -> CameraView {
        CameraView::new(Matrix3::identity(), Matrix4::identity(), size).unwrap()
    }

    fn view_with_principal(cx: f64, cy: f64) -> CameraView {
        let mut k = Matrix3::identity();
        k[(0, 2)] = cx;
        k[(1, 2)] = cy;
        CameraView::new(k, Matrix4::identity(), (10, 10)).unwrap()
    }

    fn random_view(rng: &mut impl Rng) -> CameraView {
        let rot = nalgebra::Rotation3::from_euler_angles(
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        );
        let t = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let mut k = Matrix3::identity();
        k[(0, 0)] = rng.random_range(100.0..500.0);
        k[(1, 1)] = rng.random_range(100.0..500.0);
        k[(0, 2)] = rng.random_range(300.0..400.0);
        k[(1, 2)] = rng.random_range(100.0..150.0);
        CameraView::new(k, e, (256, 704)).unwrap()
    }

    #[test]
    fn pinhole_identity_projects_axis_point() {
        let rig = CameraRig::new(vec![pinhole_identity((10, 10))]).unwrap();
        let hit = project_to_first_hit([0.0, 0.0, 5.0], &rig).unwrap();
        assert_eq!((hit.x, hit.y, hit.view, hit.depth), (0.0, 0.0, 0, 5.0));
    }

    #[test]
    fn point_behind_all_cameras_is_absent() {
        let rig = CameraRig::new(vec![
            pinhole_identity((10, 10)),
            pinhole_identity((10, 10)),
        ])
        .unwrap();
        assert!(project_to_first_hit([0.0, 0.0, -2.0], &rig).is_none());
    }

    #[test]
    fn first_hit_takes_lowest_view_index() {
        // Views 1 and 3 see the point; 0, 2, 4, 5 push it out of bounds.
        let off = view_with_principal(100.0, 100.0);
        let on = view_with_principal(5.0, 5.0);
        let rig = CameraRig::new(vec![
            off.clone(),
            on.clone(),
            off.clone(),
            on,
            off.clone(),
            off,
        ])
        .unwrap();
        let hit = project_to_first_hit([0.0, 0.0, 5.0], &rig).unwrap();
        assert_eq!(hit.view, 1);
    }

    #[test]
    fn unproject_inverts_pinhole_identity() {
        let rig = CameraRig::new(vec![pinhole_identity((10, 10))]).unwrap();
        let p = unproject((0.0, 0.0), 0, 5.0, &rig);
        assert_eq!(p, [0.0, 0.0, 5.0]);
    }

    #[test]
    fn random_rig_roundtrip_within_tolerance() {
        let mut rng = crate::rng::stream(11, "geometry.test.roundtrip");
        for _ in 0..100 {
            let cam = random_view(&mut rng);
            let rig = CameraRig::new(vec![cam]).unwrap();
            let x = rng.random_range(0.0..703.0);
            let y = rng.random_range(0.0..255.0);
            let d = rng.random_range(0.5..60.0);
            let world = unproject((x, y), 0, d, &rig);
            let hit = rig.views[0].project(world).expect("reprojection stays in bounds");
            assert!((hit.0 - x).abs() < 1e-6, "x err {}", (hit.0 - x).abs());
            assert!((hit.1 - y).abs() < 1e-6, "y err {}", (hit.1 - y).abs());
            assert!((hit.2 - d).abs() < 1e-6);
        }
    }

    #[test]
    fn single_cell_table_depth_matches_axis_distance() {
        let rig = CameraRig::new(vec![pinhole_identity((10, 10))]).unwrap();
        let range = Box3 { min: [-0.5, -0.5, 4.5], max: [0.5, 0.5, 5.5] };
        let table = build_pseudo_depth_table([1, 1, 1], range, &rig).unwrap();
        assert_eq!(table.len(), 1);
        let p = table.point(0);
        assert_eq!((p.x, p.y, p.view, p.depth), (0.0, 0.0, 0, 5.0));
    }

    #[test]
    fn table_count_matches_bruteforce_projection() {
        // Independent scalar projection of all 32 centers into both views.
        let mut rng = crate::rng::stream(3, "geometry.test.table");
        let views = vec![random_view(&mut rng), random_view(&mut rng)];
        let rig = CameraRig::new(views.clone()).unwrap();
        let range = Box3 { min: [-4.0, -4.0, 0.0], max: [4.0, 4.0, 4.0] };
        let table = build_pseudo_depth_table([4, 4, 2], range, &rig).unwrap();

        let mut expected = 0usize;
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..2 {
                    let c = [
                        -4.0 + (i as f64 + 0.5) * 2.0,
                        -4.0 + (j as f64 + 0.5) * 2.0,
                        (k as f64 + 0.5) * 2.0,
                    ];
                    for v in &views {
                        let e = v.extrinsics;
                        let cx = e[(0, 0)] * c[0] + e[(0, 1)] * c[1] + e[(0, 2)] * c[2] + e[(0, 3)];
                        let cy = e[(1, 0)] * c[0] + e[(1, 1)] * c[1] + e[(1, 2)] * c[2] + e[(1, 3)];
                        let cz = e[(2, 0)] * c[0] + e[(2, 1)] * c[1] + e[(2, 2)] * c[2] + e[(2, 3)];
                        if cz <= DEPTH_EPS {
                            continue;
                        }
                        let k_ = v.intrinsics;
                        let u = (k_[(0, 0)] * cx + k_[(0, 1)] * cy + k_[(0, 2)] * cz) / cz;
                        let w = (k_[(1, 1)] * cy + k_[(1, 2)] * cz) / cz;
                        if (0.0..704.0).contains(&u) && (0.0..256.0).contains(&w) {
                            expected += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(table.len(), expected);
    }

    #[test]
    fn nearest_depth_exact_pixel_has_zero_distance() {
        let rig = CameraRig::new(vec![pinhole_identity((10, 10))]).unwrap();
        let range = Box3 { min: [-0.5, -0.5, 4.5], max: [0.5, 0.5, 5.5] };
        let table = build_pseudo_depth_table([1, 1, 1], range, &rig).unwrap();
        let (d, dist) = nearest_depth((0.0, 0.0), 0, &table).unwrap();
        assert_eq!((d, dist), (5.0, 0.0));
    }

    #[test]
    fn nearest_depth_on_empty_view_is_absent() {
        // Second view faces away from the whole range.
        let away = {
            let rot = nalgebra::Rotation3::from_euler_angles(0.0, std::f64::consts::PI, 0.0);
            let mut e = Matrix4::identity();
            e.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
            CameraView::new(Matrix3::identity(), e, (10, 10)).unwrap()
        };
        let rig = CameraRig::new(vec![pinhole_identity((10, 10)), away]).unwrap();
        let range = Box3 { min: [-0.5, -0.5, 4.5], max: [0.5, 0.5, 5.5] };
        let table = build_pseudo_depth_table([1, 1, 1], range, &rig).unwrap();
        assert_eq!(table.empty_views(), vec![1]);
        assert!(nearest_depth((5.0, 5.0), 1, &table).is_none());
    }

    #[test]
    fn nearest_depth_matches_exhaustive_scan() {
        let mut rng = crate::rng::stream(12, "geometry.test.nearest");
        // A camera looking straight down +z at a grid spread in front of it.
        let mut k = Matrix3::identity();
        k[(0, 0)] = 300.0;
        k[(1, 1)] = 300.0;
        k[(0, 2)] = 352.0;
        k[(1, 2)] = 128.0;
        let cam = CameraView::new(k, Matrix4::identity(), (256, 704)).unwrap();
        let rig = CameraRig::new(vec![cam]).unwrap();
        let range = Box3 { min: [-20.0, -8.0, 5.0], max: [20.0, 8.0, 45.0] };
        let table = build_pseudo_depth_table([10, 10, 5], range, &rig).unwrap();
        assert!(table.points_in_view(0) > 50, "fixture too sparse: {}", table.points_in_view(0));

        for _ in 0..500 {
            let q = (rng.random_range(0.0..704.0), rng.random_range(0.0..256.0));
            let got = nearest_depth(q, 0, &table).unwrap();
            // Exhaustive linear scan with the same tie rule.
            let mut best = (f64::INFINITY, usize::MAX);
            for (id, p) in table.view_points(0) {
                let d2 = (p.x - q.0).powi(2) + (p.y - q.1).powi(2);
                if d2 < best.0 || (d2 == best.0 && id < best.1) {
                    best = (d2, id);
                }
            }
            let want = (table.depth[best.1], best.0.sqrt());
            assert_eq!(got, want, "query {q:?}");
        }
    }

    #[test]
    fn rebuilt_table_serializes_identically() {
        let mut rng = crate::rng::stream(4, "geometry.test.serialize");
        let rig = CameraRig::new(vec![random_view(&mut rng), random_view(&mut rng)]).unwrap();
        let range = Box3 { min: [-10.0, -10.0, -2.0], max: [10.0, 10.0, 2.0] };
        let a = build_pseudo_depth_table([6, 6, 3], range, &rig).unwrap();
        let b = build_pseudo_depth_table([6, 6, 3], range, &rig).unwrap();
        let ab = a.to_bytes().unwrap();
        assert_eq!(ab, b.to_bytes().unwrap());

        let restored = PseudoDepthTable::from_container(
            &TensorContainer::from_bytes(&ab).unwrap(),
        )
        .unwrap();
        assert_eq!(restored.to_bytes().unwrap(), ab);
        assert_eq!(restored.rig_hash, rig.hash());
    }

    #[test]
    fn first_hit_is_order_independent() {
        let mut rng = crate::rng::stream(5, "geometry.test.firsthit");
        let rig = CameraRig::new(vec![
            random_view(&mut rng),
            random_view(&mut rng),
            random_view(&mut rng),
        ])
        .unwrap();
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                [
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-3.0..30.0),
                ]
            })
            .collect();
        let forward: Vec<Option<usize>> =
            pts.iter().map(|p| project_to_first_hit(*p, &rig).map(|h| h.view)).collect();
        let mut reversed: Vec<Option<usize>> = pts
            .iter()
            .rev()
            .map(|p| project_to_first_hit(*p, &rig).map(|h| h.view))
            .collect();
        reversed.reverse();
        assert_eq!(forward, reversed);
    }
}
