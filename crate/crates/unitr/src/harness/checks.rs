//! The invariant and acceptance suite behind `unitr check` and the
//! `acceptance` test target. Every module invariant maps to at least one
//! named check; checks tagged with a criterion number make up the
//! acceptance gate. Each check is hermetic over its own derived seed.

use ndarray::{Array2, Array3};
use rand::Rng;
use rayon::prelude::*;

use crate::attention::{
    attention_probabilities, set_attention_layer, BackboneWeights, DispatchCounter, SetBatch,
};
use crate::backbone::{
    bev_pool, expected_dispatches, inter_modal_block_2d, inter_modal_block_3d, project_tokens_2d,
    run_backbone, BackboneInputs, BackboneRun, BlockKind, DispatchMode,
};
use crate::error::Result;
use crate::geometry::{
    build_pseudo_depth_table, nearest_depth, project_to_first_hit, unproject, PseudoDepthTable,
};
use crate::harness::config::Config;
use crate::harness::container::{TensorContainer, TensorEntry};
use crate::harness::manifest::RunManifest;
use crate::harness::oracle::{
    dense_attention_layer, exhaustive_nearest, max_abs_diff, oracle_serial_backbone,
};
use crate::harness::scene::{generate_scene, SyntheticScene};
use crate::partition::{
    assign_windows, dynamic_set_partition, gather, scatter_canonical, SetOrder, SpaceTag,
    WindowSpec,
};
use crate::rng;
use crate::tokenizers::{patchify, raw_patches, voxelize, PointCloud, TokenSequence};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    /// Acceptance criterion this check belongs to; 0 for module invariants
    /// outside the numbered gate.
    pub criterion: u8,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {:<36} {} {} ({} ms)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            if self.criterion == 0 { "[inv]".to_string() } else { format!("[c{}]", self.criterion) },
            self.detail,
            self.millis
        )
    }
}

struct Fixtures {
    cfg: Config,
    seed: u64,
    scene: SyntheticScene,
    weights: BackboneWeights,
    tokens: TokenSequence,
    table: PseudoDepthTable,
    table_build_millis: u128,
    small_cfg: Config,
}

fn small_config(cfg: &Config) -> Config {
    let mut small = cfg.clone();
    small.rig.views = 2;
    small.rig.image_size = [64, 128];
    small.tokenizer.range_min = [-13.5, -13.5, -5.0];
    small.tokenizer.range_max = [13.5, 13.5, 3.0];
    small.blocks.pseudo_grid_shape = [90, 90, 8];
    small.run.points = 1000;
    small.run.boxes = 3;
    small
}

fn build_fixtures(cfg: &Config, seed: u64) -> Result<Fixtures> {
    let scene = generate_scene(seed, cfg)?;
    let weights = BackboneWeights::seeded(seed, &cfg.weights_spec());
    let lidar = voxelize(&scene.cloud, cfg.tokenizer.grid_size, cfg.range(), &weights)?;
    let image = patchify(&scene.images, cfg.tokenizer.patch_size, &weights)?;
    let tokens = TokenSequence::merged(lidar, image)?;
    let start = std::time::Instant::now();
    let table = build_pseudo_depth_table(cfg.blocks.pseudo_grid_shape, cfg.range(), &scene.rig)?;
    let table_build_millis = start.elapsed().as_millis();
    Ok(Fixtures {
        cfg: cfg.clone(),
        seed,
        scene,
        weights,
        tokens,
        table,
        table_build_millis,
        small_cfg: small_config(cfg),
    })
}

/// Run the complete suite. Each criterion prints at least one line; module
/// invariants print with an `[inv]` tag.
pub fn run_all_checks(cfg: &Config, seed: u64) -> Result<Vec<CheckOutcome>> {
    let fx = build_fixtures(cfg, seed)?;
    let mut out = Vec::new();
    let mut run = |name: &str, criterion: u8, f: &dyn Fn(&Fixtures) -> (bool, String)| {
        let start = std::time::Instant::now();
        let (passed, detail) = f(&fx);
        out.push(CheckOutcome {
            name: name.to_string(),
            criterion,
            passed,
            detail,
            millis: start.elapsed().as_millis(),
        });
    };

    run("partition.soundness", 1, &partition_soundness);
    run("attention.oracle_equivalence", 2, &attention_oracle);
    run("attention.softmax_rows", 2, &attention_softmax_rows);
    run("backbone.parallel_serial", 3, &parallel_serial_equivalence);
    run("geometry.roundtrip", 4, &geometry_roundtrip);
    run("geometry.nearest_oracle", 4, &geometry_nearest_oracle);
    run("geometry.table_cache", 4, &geometry_table_cache);
    run("fusion.reach", 5, &fusion_reach);
    run("fusion.passthrough", 5, &fusion_passthrough);
    run("backbone.determinism", 6, &backbone_determinism);
    run("pipeline.shapes", 7, &pipeline_shapes);
    run("attention.hygiene", 8, &attention_hygiene);
    run("attention.pe_jacobian", 8, &pe_jacobian);

    run("geometry.first_hit_determinism", 0, &first_hit_determinism);
    run("scene.truth_consistency", 0, &scene_truth_consistency);
    run("scene.determinism", 0, &scene_determinism);
    run("tokenizers.order_invariance", 0, &tokenizer_order_invariance);
    run("tokenizers.count_oracle", 0, &tokenizer_count_oracle);
    run("tokenizers.patch_bijection", 0, &patch_bijection);
    run("partition.rotation_consistency", 0, &rotation_consistency);
    run("partition.determinism", 0, &partition_determinism);
    run("partition.stats_duplication", 0, &stats_duplication);
    run("partition.gather_scatter", 0, &gather_scatter_roundtrip);
    run("attention.set_locality", 0, &attention_set_locality);
    run("attention.permutation", 0, &attention_permutation);
    run("attention.weight_sharing", 0, &weight_sharing);
    run("backbone.conservation", 0, &token_conservation);
    run("backbone.coordinate_restoration", 0, &coordinate_restoration);
    run("backbone.hot_swap", 0, &config_hot_swap);
    run("harness.container_roundtrip", 0, &container_roundtrip);

    Ok(out)
}

// ----- criterion 1 ---------------------------------------------------------

fn partition_soundness(fx: &Fixtures) -> (bool, String) {
    let start = std::time::Instant::now();
    let taus = [1usize, 7, 90];
    let windows = [[1i64, 1, 1], [30, 30, 1], [12, 12, 1]];
    let failures: usize = (0..1000usize)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(fx.seed, &format!("check.partition.{i}"));
            let n = r.random_range(10..=50_000usize);
            let coords: Vec<[i64; 3]> = (0..n)
                .map(|_| {
                    [r.random_range(0..360), r.random_range(0..360), r.random_range(0..2)]
                })
                .collect();
            let tau = taus[i % taus.len()];
            let win = windows[(i / taus.len()) % windows.len()];
            let spec = WindowSpec::new(win, SpaceTag::Lidar3d);
            let p = dynamic_set_partition(&coords, &spec, tau, SetOrder::XMajor);

            if p.slots.ncols() != tau {
                return 1;
            }
            let mut canonical_per_token = vec![0u32; n];
            for s in 0..p.num_sets() {
                for k in 0..tau {
                    if p.canonical[(s, k)] {
                        canonical_per_token[p.slots[(s, k)] as usize] += 1;
                    }
                }
            }
            if canonical_per_token.iter().any(|c| *c != 1) {
                return 1;
            }
            let wins = assign_windows(&coords, &spec);
            let mut pop = std::collections::HashMap::new();
            for w in &wins {
                *pop.entry(*w).or_insert(0usize) += 1;
            }
            let mut sets_per_window = std::collections::HashMap::new();
            for w in &p.set_windows {
                *sets_per_window.entry(*w).or_insert(0usize) += 1;
            }
            let ok = pop
                .iter()
                .all(|(w, t)| sets_per_window.get(w).copied().unwrap_or(0) == t.div_ceil(tau));
            usize::from(!ok)
        })
        .sum();
    let elapsed = start.elapsed();
    let in_budget = elapsed.as_secs_f64() < 30.0;
    (
        failures == 0 && in_budget,
        format!("1000 layouts, {failures} failures, {:.1}s (budget 30s)", elapsed.as_secs_f64()),
    )
}

// ----- criterion 2 ---------------------------------------------------------

fn attention_oracle(fx: &Fixtures) -> (bool, String) {
    let start = std::time::Instant::now();
    let layers = fx.weights.layers.len();
    let c = fx.weights.channels;
    let worst = (0..1000usize)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(fx.seed, &format!("check.attn.{i}"));
            let tau = r.random_range(1..=90usize);
            let feats = Array3::from_shape_fn((1, tau, c), |_| r.random_range(-1.0..1.0f32));
            let coords = Array3::from_shape_fn((1, tau, 3), |_| r.random_range(-1.0..1.0f32));
            let batch = SetBatch::new(feats, coords);
            let layer = i % layers;
            let engine =
                set_attention_layer(&batch, &fx.weights, layer, &DispatchCounter::new()).unwrap();
            let oracle = dense_attention_layer(&batch, &fx.weights, layer);
            max_abs_diff(&engine.features, &oracle)
        })
        .reduce(|| 0.0, f64::max);
    let elapsed = start.elapsed();
    let ok = worst <= 1e-6 && elapsed.as_secs_f64() < 60.0;
    (ok, format!("1000 sets, max |diff| {worst:.2e} (tol 1e-6), {:.1}s (budget 60s)", elapsed.as_secs_f64()))
}

fn attention_softmax_rows(fx: &Fixtures) -> (bool, String) {
    let mut r = rng::stream(fx.seed, "check.softmax");
    let c = fx.weights.channels;
    let mut worst = 0.0f64;
    for i in 0..50 {
        let tau = r.random_range(1..=90usize);
        let feats = Array3::from_shape_fn((1, tau, c), |_| r.random_range(-1.0..1.0f32));
        let coords = Array3::from_shape_fn((1, tau, 3), |_| r.random_range(-1.0..1.0f32));
        let batch = SetBatch::new(feats, coords);
        for head in attention_probabilities(&batch, &fx.weights, i % fx.weights.layers.len(), 0) {
            for row in head.rows() {
                worst = worst.max((row.sum() - 1.0).abs());
            }
        }
    }
    (worst <= 1e-6, format!("max |row sum - 1| = {worst:.2e} over 50 sets x heads"))
}

// ----- criterion 3 ---------------------------------------------------------

fn parallel_serial_equivalence(fx: &Fixtures) -> (bool, String) {
    let cfg = &fx.small_cfg;
    let rig = match cfg.build_rig() {
        Ok(r) => r,
        Err(e) => return (false, format!("rig: {e}")),
    };
    let table = match build_pseudo_depth_table(cfg.blocks.pseudo_grid_shape, cfg.range(), &rig) {
        Ok(t) => t,
        Err(e) => return (false, format!("table: {e}")),
    };
    let params = cfg.backbone_params(false);
    let mut worst = 0.0f64;
    for s in 0..10u64 {
        let scene_seed = fx.seed.wrapping_add(1000 + s);
        let scene = match generate_scene(scene_seed, cfg) {
            Ok(sc) => sc,
            Err(e) => return (false, format!("scene {s}: {e}")),
        };
        let weights = BackboneWeights::seeded(scene_seed, &cfg.weights_spec());
        let inputs = BackboneInputs {
            cloud: &scene.cloud,
            images: &scene.images,
            rig: &scene.rig,
            table: Some(&table),
        };
        let par = match run_backbone(&inputs, &params, &weights, DispatchMode::Parallel) {
            Ok(r) => r,
            Err(e) => return (false, format!("parallel {s}: {e}")),
        };
        let ser = match oracle_serial_backbone(&inputs, &params, &weights) {
            Ok(r) => r,
            Err(e) => return (false, format!("serial {s}: {e}")),
        };
        worst = worst.max(max_abs_diff(&par.bev.features, &ser.bev.features));

        let mp = RunManifest::new(cfg, scene_seed, DispatchMode::Parallel, &par);
        let ms = RunManifest::new(cfg, scene_seed, DispatchMode::Serial, &ser);
        if mp.dispatches != 8 || mp.expected_dispatches != 8 {
            return (false, format!("scene {s}: parallel dispatches {} != 8", mp.dispatches));
        }
        if ms.dispatches != 14 || ms.expected_dispatches != 14 {
            return (false, format!("scene {s}: serial dispatches {} != 14", ms.dispatches));
        }
        if mp.per_block_dispatches != vec![2, 2, 2, 2] || ms.per_block_dispatches != vec![4, 4, 4, 2]
        {
            return (
                false,
                format!(
                    "scene {s}: per-block dispatches {:?} / {:?}",
                    mp.per_block_dispatches, ms.per_block_dispatches
                ),
            );
        }
    }
    (
        worst <= 1e-6,
        format!("10 scenes, max BEV |diff| {worst:.2e} (tol 1e-6), dispatches 8 vs 14"),
    )
}

// ----- criterion 4 ---------------------------------------------------------

fn geometry_roundtrip(fx: &Fixtures) -> (bool, String) {
    let rig = &fx.scene.rig;
    let b = rig.view_count();
    let worst = (0..10_000usize)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(fx.seed, &format!("check.roundtrip.{i}"));
            let view = r.random_range(0..b);
            let (h, w) = rig.views[view].image_size;
            let pixel = (
                r.random_range(0.0..w as f64 - 1e-9),
                r.random_range(0.0..h as f64 - 1e-9),
            );
            let depth = r.random_range(0.5..60.0);
            // A visible world point by construction.
            let p = unproject(pixel, view, depth, rig);
            match project_to_first_hit(p, rig) {
                None => f64::INFINITY,
                Some(hit) => {
                    let back = unproject((hit.x, hit.y), hit.view, hit.depth, rig);
                    (0..3).map(|a| (back[a] - p[a]).abs()).fold(0.0, f64::max)
                }
            }
        })
        .reduce(|| 0.0, f64::max);
    (worst < 1e-6, format!("10000 points, max round-trip error {worst:.2e} m (tol 1e-6)"))
}

fn geometry_nearest_oracle(fx: &Fixtures) -> (bool, String) {
    let table = &fx.table;
    let b = table.view_count();
    let mismatches: usize = (0..10_000usize)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(fx.seed, &format!("check.nearest.{i}"));
            let view = r.random_range(0..b);
            let (h, w) = fx.scene.rig.views[view].image_size;
            let pixel = (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64));
            let got = nearest_depth(pixel, view, table);
            let want = exhaustive_nearest(table, pixel, view);
            usize::from(got != want)
        })
        .sum();
    (
        mismatches == 0,
        format!("10000 queries vs exhaustive scan, {mismatches} mismatches (bit-exact)"),
    )
}

fn geometry_table_cache(fx: &Fixtures) -> (bool, String) {
    let rebuilt = match build_pseudo_depth_table(
        fx.cfg.blocks.pseudo_grid_shape,
        fx.cfg.range(),
        &fx.scene.rig,
    ) {
        Ok(t) => t,
        Err(e) => return (false, format!("rebuild: {e}")),
    };
    let a = fx.table.to_bytes().unwrap_or_default();
    let b = rebuilt.to_bytes().unwrap_or_default();
    let identical = !a.is_empty() && a == b;
    let in_budget = fx.table_build_millis < 60_000;
    (
        identical && in_budget,
        format!(
            "nu = {}, build {} ms (budget 60s), rebuild byte-identical: {identical}",
            fx.table.len(),
            fx.table_build_millis
        ),
    )
}

// ----- criterion 5 ---------------------------------------------------------

fn fusion_reach(fx: &Fixtures) -> (bool, String) {
    let tokens = &fx.tokens;
    let n = tokens.lidar_count;
    if n < 5000 {
        return (false, format!("default scene produced only {n} lidar tokens (need >= 5000)"));
    }
    let block = fx.cfg.block_config();

    let mut t2 = tokens.clone();
    let r2 = match inter_modal_block_2d(
        &mut t2,
        &fx.scene.rig,
        &fx.weights,
        &block,
        1,
        &DispatchCounter::new(),
        DispatchMode::Parallel,
    ) {
        Ok(r) => r,
        Err(e) => return (false, format!("inter2d: {e}")),
    };
    let mut t3 = tokens.clone();
    let r3 = match inter_modal_block_3d(
        &mut t3,
        &fx.table,
        &fx.scene.rig,
        &fx.weights,
        &block,
        3,
        &DispatchCounter::new(),
        DispatchMode::Parallel,
    ) {
        Ok(r) => r,
        Err(e) => return (false, format!("inter3d: {e}")),
    };

    // Intra partitions are built per modality; count any set whose members
    // are not single-modality.
    let lidar_part = dynamic_set_partition(
        &tokens.coords[..n],
        &WindowSpec::new(block.lidar_window, SpaceTag::Lidar3d),
        block.tau,
        SetOrder::XMajor,
    );
    let image_part = dynamic_set_partition(
        &tokens.coords[n..],
        &WindowSpec::new(block.image_window, SpaceTag::Image2d),
        block.tau,
        SetOrder::XMajor,
    );
    let intra_pure = (0..lidar_part.num_sets()).all(|s| {
        (0..block.tau).all(|k| (lidar_part.slots[(s, k)] as usize) < n)
    }) && (0..image_part.num_sets()).all(|s| {
        (0..block.tau).all(|k| (image_part.slots[(s, k)] as usize) < tokens.image_count())
    });

    let ok = r2.mixed_sets >= 1 && r3.mixed_sets >= 1 && intra_pure;
    (
        ok,
        format!(
            "N={n}, inter2d mixed sets {}, inter3d mixed sets {}, intra mixes 0",
            r2.mixed_sets, r3.mixed_sets
        ),
    )
}

fn fusion_passthrough(fx: &Fixtures) -> (bool, String) {
    let tokens = &fx.tokens;
    let n = tokens.lidar_count;
    let block = fx.cfg.block_config();

    // 2D: lidar tokens invisible to every camera must be bit-identical.
    let (participants_2d, _) = match project_tokens_2d(tokens, &fx.scene.rig) {
        Ok(v) => v,
        Err(e) => return (false, format!("project: {e}")),
    };
    let visible: std::collections::HashSet<usize> =
        participants_2d.iter().filter(|t| **t < n).copied().collect();
    let invisible: Vec<usize> = (0..n).filter(|t| !visible.contains(t)).collect();
    if invisible.is_empty() {
        return (false, "scene has no camera-invisible lidar tokens to exercise".into());
    }
    let mut t2 = tokens.clone();
    if let Err(e) = inter_modal_block_2d(
        &mut t2,
        &fx.scene.rig,
        &fx.weights,
        &block,
        1,
        &DispatchCounter::new(),
        DispatchMode::Parallel,
    ) {
        return (false, format!("inter2d: {e}"));
    }
    let lidar_ok = invisible.iter().all(|t| t2.features.row(*t) == tokens.features.row(*t));
    let touched =
        visible.iter().take(50).any(|t| t2.features.row(*t) != tokens.features.row(*t));

    // 3D: drop one view from the table; its image tokens lose their depth
    // source and must pass through bit-identical.
    let dropped_view = 0usize;
    let doctored = match doctor_table_without_view(&fx.table, dropped_view) {
        Ok(t) => t,
        Err(e) => return (false, format!("doctored table: {e}")),
    };
    let mut t3 = tokens.clone();
    let r3 = match inter_modal_block_3d(
        &mut t3,
        &doctored,
        &fx.scene.rig,
        &fx.weights,
        &block,
        3,
        &DispatchCounter::new(),
        DispatchMode::Parallel,
    ) {
        Ok(r) => r,
        Err(e) => return (false, format!("inter3d: {e}")),
    };
    let depthless: Vec<usize> = (n..tokens.len())
        .filter(|t| tokens.coords[*t][2] as usize == dropped_view)
        .collect();
    let image_ok =
        depthless.iter().all(|t| t3.features.row(*t) == tokens.features.row(*t));

    let ok = lidar_ok && image_ok && touched && r3.passthrough >= depthless.len();
    (
        ok,
        format!(
            "{} invisible lidar and {} depthless image tokens bit-identical",
            invisible.len(),
            depthless.len()
        ),
    )
}

fn doctor_table_without_view(table: &PseudoDepthTable, view: usize) -> Result<PseudoDepthTable> {
    let c = table.to_container();
    let mut filtered = TensorContainer::new();
    let keep: Vec<usize> = (0..table.len())
        .filter(|i| table.point(*i).view != view)
        .collect();
    for e in &c.entries {
        match e.name.as_str() {
            "point_x" | "point_y" | "point_depth" | "point_view" => {
                if let crate::harness::container::TensorData::I64(v) = &e.data {
                    let data: Vec<i64> = keep.iter().map(|i| v[*i]).collect();
                    filtered.push(TensorEntry::i64(e.name.clone(), vec![data.len() as u64], data));
                }
            }
            _ => filtered.push(e.clone()),
        }
    }
    PseudoDepthTable::from_container(&filtered)
}

// ----- criterion 6 ---------------------------------------------------------

fn backbone_determinism(fx: &Fixtures) -> (bool, String) {
    let params = fx.cfg.backbone_params(false);
    let mut artifacts: Vec<(Vec<u8>, String)> = Vec::new();
    for _ in 0..2 {
        let scene = match generate_scene(fx.seed, &fx.cfg) {
            Ok(s) => s,
            Err(e) => return (false, format!("scene: {e}")),
        };
        let weights = BackboneWeights::seeded(fx.seed, &fx.cfg.weights_spec());
        let inputs = BackboneInputs {
            cloud: &scene.cloud,
            images: &scene.images,
            rig: &scene.rig,
            table: Some(&fx.table),
        };
        let run = match run_backbone(&inputs, &params, &weights, DispatchMode::Parallel) {
            Ok(r) => r,
            Err(e) => return (false, format!("run: {e}")),
        };
        let bev = match run.bev.to_container().to_bytes() {
            Ok(b) => b,
            Err(e) => return (false, format!("dump: {e}")),
        };
        let manifest = RunManifest::new(&fx.cfg, fx.seed, DispatchMode::Parallel, &run).to_json();
        if run.dispatches != expected_dispatches(&params.block, DispatchMode::Parallel) {
            return (false, format!("dispatches {} != expected", run.dispatches));
        }
        artifacts.push((bev, manifest));
    }
    // The serial reference must reproduce the default-scene grid as well.
    let scene = match generate_scene(fx.seed, &fx.cfg) {
        Ok(s) => s,
        Err(e) => return (false, format!("scene: {e}")),
    };
    let weights = BackboneWeights::seeded(fx.seed, &fx.cfg.weights_spec());
    let inputs = BackboneInputs {
        cloud: &scene.cloud,
        images: &scene.images,
        rig: &scene.rig,
        table: Some(&fx.table),
    };
    let serial = match oracle_serial_backbone(&inputs, &params, &weights) {
        Ok(r) => r,
        Err(e) => return (false, format!("serial run: {e}")),
    };
    if serial.dispatches != expected_dispatches(&params.block, DispatchMode::Serial) {
        return (false, format!("serial dispatches {} != expected", serial.dispatches));
    }
    let serial_bev = serial.bev.to_container().to_bytes().unwrap_or_default();
    let ok = artifacts[0] == artifacts[1] && serial_bev == artifacts[0].0;
    (
        ok,
        format!(
            "two runs byte-identical: {}; serial default-scene grid identical: {}",
            artifacts[0] == artifacts[1],
            serial_bev == artifacts[0].0
        ),
    )
}

// ----- criterion 7 ---------------------------------------------------------

fn pipeline_shapes(fx: &Fixtures) -> (bool, String) {
    let tokens = &fx.tokens;
    let meta = match tokens.image_grid {
        Some(m) => m,
        None => return (false, "no image tokens".into()),
    };
    let m = tokens.image_count();
    let bev = match bev_pool(tokens) {
        Ok(b) => b,
        Err(e) => return (false, format!("bev: {e}")),
    };
    let dims = bev.features.dim();
    let seq = &fx.cfg.blocks.sequence;
    let ok = m == 16_896
        && meta.grid == (88, 32)
        && dims == (360, 360, 128)
        && fx.scene.images.pixels.dim() == (6, 256, 704, 3)
        && *seq
            == vec![BlockKind::Intra, BlockKind::Inter2d, BlockKind::Inter2d, BlockKind::Inter3d];
    (
        ok,
        format!(
            "M={m} (want 16896), per-view grid {:?} (want (88, 32) cols x rows), BEV {dims:?}, images {:?}",
            meta.grid,
            fx.scene.images.pixels.dim()
        ),
    )
}

// ----- criterion 8 ---------------------------------------------------------

fn attention_hygiene(fx: &Fixtures) -> (bool, String) {
    let mut spec = fx.cfg.weights_spec();
    spec.layers = 20;
    let w = BackboneWeights::seeded_with_std(fx.seed, &spec, 0.02);
    let c = spec.channels;
    let tau = fx.cfg.partition.tau;
    let mut r = rng::stream(fx.seed, "check.hygiene");
    let mut feats = Array3::from_shape_fn((4, tau, c), |_| r.random_range(-1.0..1.0f32));
    // Normalize rows to unit RMS over channels.
    for s in 0..4 {
        for k in 0..tau {
            let mut row = feats.slice_mut(ndarray::s![s, k, ..]);
            let rms = (row.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>() / c as f64).sqrt();
            row.mapv_inplace(|v| (f64::from(v) / rms) as f32);
        }
    }
    let coords = Array3::from_shape_fn((4, tau, 3), |_| r.random_range(-1.0..1.0f32));
    let mut batch = SetBatch::new(feats, coords);
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for layer in 0..20 {
        batch = match set_attention_layer(&batch, &w, layer, &DispatchCounter::new()) {
            Ok(b) => b,
            Err(e) => return (false, format!("layer {layer}: {e}")),
        };
        for s in 0..4 {
            for k in 0..tau {
                let row = batch.features.slice(ndarray::s![s, k, ..]);
                let rms =
                    (row.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>() / c as f64).sqrt();
                lo = lo.min(rms);
                hi = hi.max(rms);
            }
        }
    }
    let finite = batch.features.iter().all(|v| v.is_finite());
    let ok = finite && lo >= 0.1 && hi <= 10.0;
    (ok, format!("20 layers finite, per-token RMS norm in [{lo:.3}, {hi:.3}] (want [0.1, 10])"))
}

fn pe_jacobian(fx: &Fixtures) -> (bool, String) {
    let pe = &fx.weights.layers[0].pos_mlp;
    let mut r = rng::stream(fx.seed, "check.jacobian");
    let hidden = pe.fc1.out_dim();
    let out_dim = pe.fc2.out_dim();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        // Analytic Jacobian of fc2(tanh(fc1 x)).
        let pre: Vec<f64> = (0..hidden)
            .map(|h| {
                let mut a = f64::from(pe.fc1.bias[h]);
                for (i, xi) in x.iter().enumerate() {
                    a += f64::from(pe.fc1.weight[(i, h)]) * xi;
                }
                a
            })
            .collect();
        let forward = |x: &[f64]| -> Vec<f64> {
            let arr = Array2::from_shape_vec((1, 3), x.to_vec()).unwrap();
            pe.forward_f64(arr.view()).row(0).to_vec()
        };
        let mut max_entry = 0.0f64;
        let mut max_err = 0.0f64;
        for a in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[a] += eps;
            xm[a] -= eps;
            let fp = forward(&xp);
            let fm = forward(&xm);
            for o in 0..out_dim {
                let analytic: f64 = (0..hidden)
                    .map(|h| {
                        let sech2 = 1.0 - pre[h].tanh().powi(2);
                        f64::from(pe.fc2.weight[(h, o)]) * sech2 * f64::from(pe.fc1.weight[(a, h)])
                    })
                    .sum();
                let fd = (fp[o] - fm[o]) / (2.0 * eps);
                max_entry = max_entry.max(analytic.abs());
                max_err = max_err.max((fd - analytic).abs());
            }
        }
        worst = worst.max(max_err / max_entry.max(1e-12));
    }
    (worst <= 1e-4, format!("central differences vs analytic: rel err {worst:.2e} (tol 1e-4)"))
}

// ----- module invariants ----------------------------------------------------

fn first_hit_determinism(fx: &Fixtures) -> (bool, String) {
    let pts: Vec<[f64; 3]> = fx
        .scene
        .cloud
        .xyz
        .iter()
        .take(2000)
        .map(|p| [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])])
        .collect();
    let forward: Vec<Option<usize>> =
        pts.iter().map(|p| project_to_first_hit(*p, &fx.scene.rig).map(|h| h.view)).collect();
    let mut reversed: Vec<Option<usize>> = pts
        .iter()
        .rev()
        .map(|p| project_to_first_hit(*p, &fx.scene.rig).map(|h| h.view))
        .collect();
    reversed.reverse();
    (forward == reversed, "per-point view assignment independent of input order".into())
}

fn scene_truth_consistency(fx: &Fixtures) -> (bool, String) {
    let mut worst = 0.0f64;
    for t in &fx.scene.truth {
        let p = fx.scene.cloud.xyz[t.point];
        match project_to_first_hit(
            [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])],
            &fx.scene.rig,
        ) {
            Some(hit) if hit.view == t.view => {
                worst = worst.max((hit.x - t.x).abs().max((hit.y - t.y).abs()));
            }
            _ => return (false, format!("point {} disagrees on view", t.point)),
        }
    }
    (
        worst < 1e-6,
        format!("{} records re-verified, max pixel error {worst:.2e}", fx.scene.truth.len()),
    )
}

fn scene_determinism(fx: &Fixtures) -> (bool, String) {
    match generate_scene(fx.seed, &fx.cfg) {
        Ok(again) => {
            let ok = again.cloud == fx.scene.cloud && again.images.pixels == fx.scene.images.pixels;
            (ok, "regenerated scene is byte-identical".into())
        }
        Err(e) => (false, format!("{e}")),
    }
}

fn tokenizer_order_invariance(fx: &Fixtures) -> (bool, String) {
    use rand::seq::SliceRandom;
    let cloud = &fx.scene.cloud;
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.shuffle(&mut rng::stream(fx.seed, "check.shuffle"));
    let shuffled = PointCloud::new(
        order.iter().map(|i| cloud.xyz[*i]).collect(),
        order.iter().map(|i| cloud.extras[*i]).collect(),
        1,
    );
    let a = voxelize(cloud, fx.cfg.tokenizer.grid_size, fx.cfg.range(), &fx.weights);
    let b = voxelize(&shuffled, fx.cfg.tokenizer.grid_size, fx.cfg.range(), &fx.weights);
    match (a, b) {
        (Ok(a), Ok(b)) => (
            a.coords == b.coords && a.features == b.features,
            "permuted cloud voxelizes identically".into(),
        ),
        _ => (false, "voxelize failed".into()),
    }
}

fn tokenizer_count_oracle(fx: &Fixtures) -> (bool, String) {
    let cloud = &fx.scene.cloud;
    let grid = fx.cfg.tokenizer.grid_size;
    let range = fx.cfg.range();
    let mut cells = std::collections::HashSet::new();
    for p in &cloud.xyz {
        let world = [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])];
        let inside = (0..3).all(|a| world[a] >= range.min[a] && world[a] < range.max[a]);
        if inside {
            cells.insert((
                ((world[0] - range.min[0]) / grid[0]).floor() as i64,
                ((world[1] - range.min[1]) / grid[1]).floor() as i64,
                ((world[2] - range.min[2]) / grid[2]).floor() as i64,
            ));
        }
    }
    let n = fx.tokens.lidar_count;
    (n == cells.len(), format!("N = {n}, hash-set oracle {}", cells.len()))
}

fn patch_bijection(fx: &Fixtures) -> (bool, String) {
    let patch = fx.cfg.tokenizer.patch_size;
    let (raw, coords, _) = match raw_patches(&fx.scene.images, patch) {
        Ok(v) => v,
        Err(e) => return (false, format!("{e}")),
    };
    let mut rebuilt = ndarray::Array4::<f32>::from_elem(fx.scene.images.pixels.dim(), f32::NAN);
    for (t, c) in coords.iter().enumerate() {
        let (col, row, b) = (c[0] as usize, c[1] as usize, c[2] as usize);
        let mut d = 0;
        for py in 0..patch {
            for px in 0..patch {
                for ch in 0..3 {
                    let dst = &mut rebuilt[(b, row * patch + py, col * patch + px, ch)];
                    if !dst.is_nan() {
                        return (false, "pixel covered twice".into());
                    }
                    *dst = raw[(t, d)] as f32;
                    d += 1;
                }
            }
        }
    }
    (rebuilt == fx.scene.images.pixels, "patch reassembly reproduces the image exactly".into())
}

fn rotation_consistency(fx: &Fixtures) -> (bool, String) {
    let n = fx.tokens.lidar_count;
    let spec = WindowSpec::new(fx.cfg.partition.lidar_window, SpaceTag::Lidar3d);
    let x = dynamic_set_partition(&fx.tokens.coords[..n], &spec, fx.cfg.partition.tau, SetOrder::XMajor);
    let y = dynamic_set_partition(&fx.tokens.coords[..n], &spec, fx.cfg.partition.tau, SetOrder::YMajor);
    (
        x.set_windows == y.set_windows,
        format!("{} sets cover identical windows under both rotations", x.num_sets()),
    )
}

fn partition_determinism(fx: &Fixtures) -> (bool, String) {
    let n = fx.tokens.lidar_count;
    let spec = WindowSpec::new(fx.cfg.partition.lidar_window, SpaceTag::Lidar3d);
    let a = dynamic_set_partition(&fx.tokens.coords[..n], &spec, fx.cfg.partition.tau, SetOrder::XMajor);
    let b = dynamic_set_partition(&fx.tokens.coords[..n], &spec, fx.cfg.partition.tau, SetOrder::XMajor);
    (a.digest() == b.digest(), "identical inputs give byte-identical partitions".into())
}

fn stats_duplication(fx: &Fixtures) -> (bool, String) {
    let n = fx.tokens.lidar_count;
    let spec = WindowSpec::new(fx.cfg.partition.lidar_window, SpaceTag::Lidar3d);
    let p = dynamic_set_partition(&fx.tokens.coords[..n], &spec, fx.cfg.partition.tau, SetOrder::XMajor);
    let stats = p.stats();
    // Direct count: occurrences beyond the first, per token.
    let mut occurrences = vec![0usize; n];
    for v in &p.slots {
        occurrences[*v as usize] += 1;
    }
    let direct: usize = occurrences.iter().map(|o| o - 1).sum();
    let rate = direct as f64 / n as f64;
    let ok = stats.duplicates == direct
        && (stats.duplication_rate - rate).abs() < 1e-15
        && stats.slots == stats.sets * fx.cfg.partition.tau
        && stats.occupancy_histogram.iter().map(|(_, c)| c).sum::<usize>() == stats.windows;
    (ok, format!("duplication rate {:.4} matches direct count", stats.duplication_rate))
}

fn gather_scatter_roundtrip(fx: &Fixtures) -> (bool, String) {
    let n = fx.tokens.lidar_count;
    let spec = WindowSpec::new(fx.cfg.partition.lidar_window, SpaceTag::Lidar3d);
    let p = dynamic_set_partition(&fx.tokens.coords[..n], &spec, fx.cfg.partition.tau, SetOrder::XMajor);
    let feats = fx.tokens.features.slice(ndarray::s![..n, ..]).to_owned();
    let coords = &fx.tokens.coords[..n];
    match gather(&p, feats.view(), coords).and_then(|(g, _)| scatter_canonical(&p, g.view())) {
        Ok(back) => (back == feats, "gather then canonical scatter is the identity".into()),
        Err(e) => (false, format!("{e}")),
    }
}

fn attention_set_locality(fx: &Fixtures) -> (bool, String) {
    let mut r = rng::stream(fx.seed, "check.locality");
    let c = fx.weights.channels;
    let feats = Array3::from_shape_fn((4, 16, c), |_| r.random_range(-1.0..1.0f32));
    let coords = Array3::from_shape_fn((4, 16, 3), |_| r.random_range(-1.0..1.0f32));
    let batch = SetBatch::new(feats, coords);
    let base = set_attention_layer(&batch, &fx.weights, 0, &DispatchCounter::new()).unwrap();
    let mut poked = batch.clone();
    poked.features.slice_mut(ndarray::s![1.., .., ..]).fill(0.0);
    let out = set_attention_layer(&poked, &fx.weights, 0, &DispatchCounter::new()).unwrap();
    let ok = base.features.slice(ndarray::s![0, .., ..]) == out.features.slice(ndarray::s![0, .., ..]);
    (ok, "zeroing tokens outside a set leaves its outputs bit-identical".into())
}

fn attention_permutation(fx: &Fixtures) -> (bool, String) {
    use rand::seq::SliceRandom;
    let mut r = rng::stream(fx.seed, "check.permutation");
    let c = fx.weights.channels;
    let tau = 24;
    let feats = Array3::from_shape_fn((1, tau, c), |_| r.random_range(-1.0..1.0f32));
    let coords = Array3::from_shape_fn((1, tau, 3), |_| r.random_range(-1.0..1.0f32));
    let batch = SetBatch::new(feats, coords);
    let base = set_attention_layer(&batch, &fx.weights, 0, &DispatchCounter::new()).unwrap();
    let mut perm: Vec<usize> = (0..tau).collect();
    perm.shuffle(&mut r);
    let mut shuffled = batch.clone();
    for (dst, src) in perm.iter().enumerate() {
        shuffled
            .features
            .slice_mut(ndarray::s![0, dst, ..])
            .assign(&batch.features.slice(ndarray::s![0, *src, ..]));
        shuffled
            .pe_coords
            .slice_mut(ndarray::s![0, dst, ..])
            .assign(&batch.pe_coords.slice(ndarray::s![0, *src, ..]));
    }
    let out = set_attention_layer(&shuffled, &fx.weights, 0, &DispatchCounter::new()).unwrap();
    let mut worst = 0.0f64;
    for (dst, src) in perm.iter().enumerate() {
        let a = out.features.slice(ndarray::s![0, dst, ..]);
        let b = base.features.slice(ndarray::s![0, *src, ..]);
        for (x, y) in a.iter().zip(b.iter()) {
            worst = worst.max((f64::from(*x) - f64::from(*y)).abs());
        }
    }
    (worst <= 1e-6, format!("slot permutation equivariance, max |diff| {worst:.2e}"))
}

fn weight_sharing(fx: &Fixtures) -> (bool, String) {
    let banned = ["lidar", "image", "camera"];
    for name in fx.weights.tensor_names() {
        for b in banned {
            if name.contains(b) {
                return (false, format!("tensor `{name}` references a modality"));
            }
        }
    }
    (true, format!("{} tensors, none modality-indexed", fx.weights.tensor_names().len()))
}

fn small_scene_tokens(fx: &Fixtures) -> Result<(SyntheticScene, BackboneWeights, TokenSequence, PseudoDepthTable)> {
    let cfg = &fx.small_cfg;
    let scene = generate_scene(fx.seed.wrapping_add(77), cfg)?;
    let weights = BackboneWeights::seeded(fx.seed, &cfg.weights_spec());
    let lidar = voxelize(&scene.cloud, cfg.tokenizer.grid_size, cfg.range(), &weights)?;
    let image = patchify(&scene.images, cfg.tokenizer.patch_size, &weights)?;
    let tokens = TokenSequence::merged(lidar, image)?;
    let table = build_pseudo_depth_table(cfg.blocks.pseudo_grid_shape, cfg.range(), &scene.rig)?;
    Ok((scene, weights, tokens, table))
}

fn token_conservation(fx: &Fixtures) -> (bool, String) {
    let (scene, weights, tokens, table) = match small_scene_tokens(fx) {
        Ok(v) => v,
        Err(e) => return (false, format!("{e}")),
    };
    let block = fx.small_cfg.block_config();
    let mut t = tokens.clone();
    let counter = DispatchCounter::new();
    type BlockStep<'a> = &'a dyn Fn(&mut TokenSequence) -> Result<()>;
    let steps: [BlockStep; 3] = [
        &|t| crate::backbone::intra_modal_block(t, &weights, &block, 0, &counter, DispatchMode::Parallel),
        &|t| inter_modal_block_2d(t, &scene.rig, &weights, &block, 1, &counter, DispatchMode::Parallel).map(|_| ()),
        &|t| inter_modal_block_3d(t, &table, &scene.rig, &weights, &block, 3, &counter, DispatchMode::Parallel).map(|_| ()),
    ];
    for (i, step) in steps.iter().enumerate() {
        if let Err(e) = step(&mut t) {
            return (false, format!("block {i}: {e}"));
        }
        if t.len() != tokens.len() || t.modality != tokens.modality || t.lidar_count != tokens.lidar_count {
            return (false, format!("block {i} changed token population"));
        }
    }
    (true, format!("{} tokens with stable tags across all block kinds", tokens.len()))
}

fn coordinate_restoration(fx: &Fixtures) -> (bool, String) {
    let (scene, weights, tokens, table) = match small_scene_tokens(fx) {
        Ok(v) => v,
        Err(e) => return (false, format!("{e}")),
    };
    let block = fx.small_cfg.block_config();
    let mut t2 = tokens.clone();
    if let Err(e) = inter_modal_block_2d(&mut t2, &scene.rig, &weights, &block, 1, &DispatchCounter::new(), DispatchMode::Parallel) {
        return (false, format!("inter2d: {e}"));
    }
    let mut t3 = tokens.clone();
    if let Err(e) = inter_modal_block_3d(&mut t3, &table, &scene.rig, &weights, &block, 3, &DispatchCounter::new(), DispatchMode::Parallel) {
        return (false, format!("inter3d: {e}"));
    }
    let ok = t2.coords == tokens.coords && t3.coords == tokens.coords;
    (ok, "lidar 3D and image 2D coordinates equal their pre-block values exactly".into())
}

fn config_hot_swap(fx: &Fixtures) -> (bool, String) {
    let (scene, weights, _, table) = match small_scene_tokens(fx) {
        Ok(v) => v,
        Err(e) => return (false, format!("{e}")),
    };
    let inputs = BackboneInputs {
        cloud: &scene.cloud,
        images: &scene.images,
        rig: &scene.rig,
        table: Some(&table),
    };
    let run_with = |sequence: Vec<BlockKind>| -> Result<BackboneRun> {
        let mut cfg = fx.small_cfg.clone();
        cfg.blocks.sequence = sequence;
        run_backbone(&inputs, &cfg.backbone_params(false), &weights, DispatchMode::Parallel)
    };
    let default = run_with(fx.small_cfg.blocks.sequence.clone());
    let alt = run_with(vec![BlockKind::Intra, BlockKind::Inter3d, BlockKind::Inter2d, BlockKind::Inter2d]);
    match (default, alt) {
        (Ok(a), Ok(b)) => {
            let da = a.bev.to_container().to_bytes().unwrap_or_default();
            let db = b.bev.to_container().to_bytes().unwrap_or_default();
            (da != db, "alternative block order runs and differs from default".into())
        }
        (Err(e), _) | (_, Err(e)) => (false, format!("{e}")),
    }
}

fn container_roundtrip(fx: &Fixtures) -> (bool, String) {
    let mut r = rng::stream(fx.seed, "check.container");
    let mut c = TensorContainer::new();
    c.push(TensorEntry::f32("scalar", vec![], vec![r.random_range(-1.0..1.0)]));
    c.push(TensorEntry::i64("empty", vec![0, 4], vec![]));
    for i in 0..10 {
        let dims: Vec<u64> = (0..r.random_range(1..4usize)).map(|_| r.random_range(1..6u64)).collect();
        let n: u64 = dims.iter().product();
        match i % 3 {
            0 => c.push(TensorEntry::f32(
                format!("t{i}"),
                dims,
                (0..n).map(|_| r.random_range(-10.0..10.0f32)).collect(),
            )),
            1 => c.push(TensorEntry::i64(
                format!("t{i}"),
                dims,
                (0..n).map(|_| r.random_range(i64::MIN..i64::MAX)).collect(),
            )),
            _ => c.push(TensorEntry::u8(
                format!("t{i}"),
                dims,
                (0..n).map(|_| r.random_range(0..=255u8)).collect(),
            )),
        }
    }
    match c.to_bytes().and_then(|b| TensorContainer::from_bytes(&b).map(|c2| (b, c2))) {
        Ok((bytes, back)) => {
            let ok = back == c && back.to_bytes().map(|b2| b2 == bytes).unwrap_or(false);
            (ok, format!("{} entries round-trip byte-identical", c.entries.len()))
        }
        Err(e) => (false, format!("{e}")),
    }
}
