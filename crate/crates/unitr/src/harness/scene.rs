//! Synthetic scenes: a seeded point cloud over a ground plane plus box
//! surfaces, a ring camera rig, procedurally rendered images with markers
//! at true point projections, and ground-truth projection records from a
//! projection routine written independently of the geometry module.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{CameraRig, CameraView};
use crate::harness::config::Config;
use crate::rng;
use crate::tokenizers::{ImageStack, PointCloud};

/// Expected first-hit projection of one cloud point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtProjection {
    pub point: usize,
    pub view: usize,
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

pub struct SyntheticScene {
    pub seed: u64,
    pub rig: CameraRig,
    pub cloud: PointCloud,
    pub images: ImageStack,
    /// One record per camera-visible point, in point order.
    pub truth: Vec<GtProjection>,
}

/// Ground plane height used by the generator, meters.
pub const GROUND_Z: f64 = -1.8;

/// Fully determined by `(seed, config)`: points on the ground and on box
/// surfaces inside the tokenizer range, plus a few returns inside the
/// camera ring that no view can see.
pub fn generate_scene(seed: u64, cfg: &Config) -> Result<SyntheticScene> {
    let rig = cfg.build_rig()?;
    let cloud = sample_cloud(seed, cfg);
    let truth = ground_truth(&cloud, &rig);
    let images = render_images(seed, cfg, &truth);
    Ok(SyntheticScene { seed, rig, cloud, images, truth })
}

fn sample_cloud(seed: u64, cfg: &Config) -> PointCloud {
    let mut rp = rng::stream(seed, "scene.points");
    let mut rb = rng::stream(seed, "scene.boxes");
    let total = cfg.run.points;
    let half = 0.98 * (cfg.tokenizer.range_max[0].min(cfg.tokenizer.range_max[1]));
    let r_max = half;

    // Boxes standing on the ground plane.
    struct SceneBox {
        center: [f64; 2],
        size: [f64; 3],
        yaw: f64,
    }
    let boxes: Vec<SceneBox> = (0..cfg.run.boxes)
        .map(|_| {
            let r = rb.random_range(4.0..(r_max * 0.6).max(5.0));
            let th = rb.random_range(0.0..std::f64::consts::TAU);
            SceneBox {
                center: [r * th.cos(), r * th.sin()],
                size: [
                    rb.random_range(3.0..5.0),
                    rb.random_range(1.6..2.2),
                    rb.random_range(1.2..1.8),
                ],
                yaw: rb.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();

    let n_blind = total / 20;
    let n_box = if boxes.is_empty() { 0 } else { total / 4 };
    let n_ground = total - n_box - n_blind;

    let mut xyz = Vec::with_capacity(total);
    let mut extras = Vec::with_capacity(total);
    let mut push = |p: [f64; 3], rng: &mut ChaCha8Rng| {
        xyz.push([p[0] as f32, p[1] as f32, p[2] as f32]);
        extras.push(rng.random_range(0.0..1.0f64) as f32);
    };

    for _ in 0..n_ground {
        let r = (rp.random_range(0.0..1.0f64) * (r_max * r_max - 2.5 * 2.5) + 2.5 * 2.5).sqrt();
        let th = rp.random_range(0.0..std::f64::consts::TAU);
        let z = GROUND_Z + rp.random_range(-0.05..0.05);
        push([r * th.cos(), r * th.sin(), z], &mut rp);
    }
    for i in 0..n_box {
        let b = &boxes[i % boxes.len()];
        let (sy, cy) = b.yaw.sin_cos();
        // Pick one of the five exposed faces, weighted by area.
        let [l, w, h] = b.size;
        let areas = [l * h, l * h, w * h, w * h, l * w];
        let total_area: f64 = areas.iter().sum();
        let mut pick = rp.random_range(0.0..total_area);
        let mut face = 0;
        for (f, a) in areas.iter().enumerate() {
            if pick < *a {
                face = f;
                break;
            }
            pick -= a;
        }
        let u = rp.random_range(-0.5..0.5);
        let v = rp.random_range(0.0..1.0);
        let local = match face {
            0 => [u * l, -w / 2.0, v * h],
            1 => [u * l, w / 2.0, v * h],
            2 => [-l / 2.0, u * w, v * h],
            3 => [l / 2.0, u * w, v * h],
            _ => [u * l, (v - 0.5) * w, h],
        };
        let world = [
            b.center[0] + cy * local[0] - sy * local[1],
            b.center[1] + sy * local[0] + cy * local[1],
            GROUND_Z + local[2],
        ];
        push(world, &mut rp);
    }
    // Returns strictly inside the camera ring: behind every outward-facing
    // view, so the 2D fusion block must pass them through untouched.
    for _ in 0..n_blind {
        let r = rp.random_range(0.05..(cfg.rig.radius * 0.6).max(0.1));
        let th = rp.random_range(0.0..std::f64::consts::TAU);
        let z = rp.random_range(GROUND_Z..cfg.rig.height - 0.3);
        push([r * th.cos(), r * th.sin(), z], &mut rp);
    }

    PointCloud::new(xyz, extras, 1)
}

/// First-hit projection written with plain scalar arithmetic; the geometry
/// module under test never runs here.
pub fn project_scalar(cam: &CameraView, p: [f64; 3]) -> Option<(f64, f64, f64)> {
    let e = &cam.extrinsics;
    let cx = e[(0, 0)] * p[0] + e[(0, 1)] * p[1] + e[(0, 2)] * p[2] + e[(0, 3)];
    let cy = e[(1, 0)] * p[0] + e[(1, 1)] * p[1] + e[(1, 2)] * p[2] + e[(1, 3)];
    let cz = e[(2, 0)] * p[0] + e[(2, 1)] * p[1] + e[(2, 2)] * p[2] + e[(2, 3)];
    if cz <= 1e-6 {
        return None;
    }
    let k = &cam.intrinsics;
    let u = (k[(0, 0)] * cx + k[(0, 1)] * cy + k[(0, 2)] * cz) / cz;
    let v = (k[(1, 1)] * cy + k[(1, 2)] * cz) / cz;
    let (h, w) = cam.image_size;
    if u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64 {
        Some((u, v, cz))
    } else {
        None
    }
}

fn ground_truth(cloud: &PointCloud, rig: &CameraRig) -> Vec<GtProjection> {
    let mut out = Vec::new();
    for (i, p) in cloud.xyz.iter().enumerate() {
        let world = [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])];
        for (b, cam) in rig.views.iter().enumerate() {
            if let Some((x, y, depth)) = project_scalar(cam, world) {
                out.push(GtProjection { point: i, view: b, x, y, depth });
                break;
            }
        }
    }
    out
}

fn render_images(seed: u64, cfg: &Config, truth: &[GtProjection]) -> ImageStack {
    let b = cfg.rig.views;
    let (h, w) = (cfg.rig.image_size[0], cfg.rig.image_size[1]);
    let mut pixels = Array4::<f32>::zeros((b, h, w, 3));
    // Smooth procedural gradient background, distinct per view.
    for view in 0..b {
        let phase = view as f64;
        for y in 0..h {
            for x in 0..w {
                let fx = x as f64 / w as f64;
                let fy = y as f64 / h as f64;
                let r = 0.5 + 0.4 * (std::f64::consts::TAU * fx + 0.7 * phase).sin();
                let g = 0.5 + 0.4 * (std::f64::consts::TAU * fy - 0.4 * phase).cos();
                let bl = 0.5 + 0.4 * (std::f64::consts::TAU * (fx + fy) + phase).sin();
                pixels[(view, y, x, 0)] = r.clamp(0.0, 1.0) as f32;
                pixels[(view, y, x, 1)] = g.clamp(0.0, 1.0) as f32;
                pixels[(view, y, x, 2)] = bl.clamp(0.0, 1.0) as f32;
            }
        }
    }
    // 3x3 markers at every true projection so cross-modal correspondence is
    // visible in dumps and checkable numerically.
    let _ = seed;
    for t in truth {
        let color = marker_color(t.point);
        let (px, py) = (t.x.round() as i64, t.y.round() as i64);
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let (mx, my) = (px + dx, py + dy);
                if mx >= 0 && (mx as usize) < w && my >= 0 && (my as usize) < h {
                    for (ch, c) in color.iter().enumerate() {
                        pixels[(t.view, my as usize, mx as usize, ch)] = *c;
                    }
                }
            }
        }
    }
    ImageStack { pixels }
}

fn marker_color(point: usize) -> [f32; 3] {
    let h = crate::rng::derive_seed(point as u64, "marker");
    [
        (h & 0xff) as f32 / 255.0,
        ((h >> 8) & 0xff) as f32 / 255.0,
        ((h >> 16) & 0xff) as f32 / 255.0,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_to_first_hit;

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.rig.views = 2;
        cfg.rig.image_size = [64, 128];
        cfg.run.points = 800;
        cfg.run.boxes = 3;
        cfg.tokenizer.range_min = [-16.0, -16.0, -5.0];
        cfg.tokenizer.range_max = [16.0, 16.0, 3.0];
        cfg
    }

    #[test]
    fn same_seed_gives_identical_scenes() {
        let cfg = small_config();
        let a = generate_scene(0, &cfg).unwrap();
        let b = generate_scene(0, &cfg).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.images.pixels, b.images.pixels);
        assert_eq!(a.truth, b.truth);
        let c = generate_scene(1, &cfg).unwrap();
        assert_ne!(a.cloud, c.cloud);
    }

    #[test]
    fn image_stack_has_configured_shape() {
        let cfg = small_config();
        let scene = generate_scene(3, &cfg).unwrap();
        assert_eq!(scene.images.pixels.dim(), (2, 64, 128, 3));
        assert!(scene.images.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn truth_records_match_geometry_module() {
        let cfg = small_config();
        let scene = generate_scene(5, &cfg).unwrap();
        assert!(scene.truth.len() > 100, "too few visible points: {}", scene.truth.len());
        for t in &scene.truth {
            let p = scene.cloud.xyz[t.point];
            let hit = project_to_first_hit(
                [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])],
                &scene.rig,
            )
            .expect("truth point must be visible");
            assert_eq!(hit.view, t.view);
            assert!((hit.x - t.x).abs() < 1e-6);
            assert!((hit.y - t.y).abs() < 1e-6);
            assert!((hit.depth - t.depth).abs() < 1e-6);
        }
    }

    #[test]
    fn blind_points_exist_inside_the_ring() {
        let cfg = small_config();
        let scene = generate_scene(7, &cfg).unwrap();
        let visible: std::collections::HashSet<usize> =
            scene.truth.iter().map(|t| t.point).collect();
        let blind = scene.cloud.len() - visible.len();
        assert!(blind > 0, "scene needs camera-invisible points");
    }
}
