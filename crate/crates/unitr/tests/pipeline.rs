//! End-to-end pipeline tests at desk scale: scene files on disk, cached
//! depth tables, backbone runs from loaded inputs, and manifest
//! determinism.

use unitr::attention::BackboneWeights;
use unitr::backbone::{run_backbone, BackboneInputs, DispatchMode};
use unitr::geometry::{build_pseudo_depth_table, PseudoDepthTable};
use unitr::harness::config::Config;
use unitr::harness::container::TensorContainer;
use unitr::harness::manifest::RunManifest;
use unitr::harness::scene::generate_scene;
use unitr::tokenizers::PointCloud;

fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.rig.views = 2;
    cfg.rig.image_size = [32, 64];
    cfg.tokenizer.range_min = [-6.0, -6.0, -5.0];
    cfg.tokenizer.range_max = [6.0, 6.0, 3.0];
    cfg.tokenizer.channels = 32;
    cfg.attention.heads = 4;
    cfg.attention.hidden_channels = 64;
    cfg.partition.tau = 16;
    cfg.blocks.pseudo_grid_shape = [40, 40, 4];
    cfg.run.points = 500;
    cfg.run.boxes = 2;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn cloud_file_roundtrip_feeds_the_backbone() {
    let cfg = tiny_config();
    let scene = generate_scene(3, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let cloud_path = dir.path().join("cloud.bin");
    std::fs::write(&cloud_path, scene.cloud.to_bytes()).unwrap();
    let loaded = PointCloud::from_bytes(
        &std::fs::read(&cloud_path).unwrap(),
        cfg.tokenizer.extra_feature_dim,
    )
    .unwrap();
    assert_eq!(loaded, scene.cloud);

    let weights = BackboneWeights::seeded(3, &cfg.weights_spec());
    let table =
        build_pseudo_depth_table(cfg.blocks.pseudo_grid_shape, cfg.range(), &scene.rig).unwrap();
    let inputs = BackboneInputs {
        cloud: &loaded,
        images: &scene.images,
        rig: &scene.rig,
        table: Some(&table),
    };
    let run = run_backbone(&inputs, &cfg.backbone_params(false), &weights, DispatchMode::Parallel)
        .unwrap();
    assert_eq!(run.dispatches, 8);
    assert_eq!(run.bev.features.dim(), (40, 40, 32));
    assert_eq!(run.bev.occupancy(), run.lidar_tokens);
}

#[test]
fn cached_table_reloads_bit_exact() {
    let cfg = tiny_config();
    let rig = cfg.build_rig().unwrap();
    let table = build_pseudo_depth_table(cfg.blocks.pseudo_grid_shape, cfg.range(), &rig).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.utr");
    table.to_container().save(&path).unwrap();
    let restored = PseudoDepthTable::from_container(&TensorContainer::load(&path).unwrap()).unwrap();
    assert_eq!(restored.rig_hash, rig.hash());
    assert_eq!(restored.to_bytes().unwrap(), table.to_bytes().unwrap());

    // Nearest-neighbor answers are identical through the cache.
    for q in [(3.0, 5.0), (60.0, 20.0), (10.5, 31.9)] {
        for view in 0..rig.view_count() {
            assert_eq!(
                unitr::geometry::nearest_depth(q, view, &restored),
                unitr::geometry::nearest_depth(q, view, &table)
            );
        }
    }
}

#[test]
fn manifests_are_deterministic_and_mode_tagged() {
    let cfg = tiny_config();
    let scene = generate_scene(9, &cfg).unwrap();
    let weights = BackboneWeights::seeded(9, &cfg.weights_spec());
    let table =
        build_pseudo_depth_table(cfg.blocks.pseudo_grid_shape, cfg.range(), &scene.rig).unwrap();
    let inputs = BackboneInputs {
        cloud: &scene.cloud,
        images: &scene.images,
        rig: &scene.rig,
        table: Some(&table),
    };
    let params = cfg.backbone_params(false);

    let a = run_backbone(&inputs, &params, &weights, DispatchMode::Parallel).unwrap();
    let b = run_backbone(&inputs, &params, &weights, DispatchMode::Parallel).unwrap();
    let ma = RunManifest::new(&cfg, 9, DispatchMode::Parallel, &a);
    let mb = RunManifest::new(&cfg, 9, DispatchMode::Parallel, &b);
    assert_eq!(ma.to_json(), mb.to_json());
    assert_eq!(
        a.bev.to_container().to_bytes().unwrap(),
        b.bev.to_container().to_bytes().unwrap()
    );

    let s = run_backbone(&inputs, &params, &weights, DispatchMode::Serial).unwrap();
    let ms = RunManifest::new(&cfg, 9, DispatchMode::Serial, &s);
    assert_eq!(ms.mode, "serial");
    assert_eq!(ms.dispatches, 14);
    assert_eq!(ma.dispatches, 8);
    assert_eq!(ma.bev_sha256, ms.bev_sha256, "serial path must reproduce the parallel BEV");
}

#[test]
fn intermediate_dumps_cover_every_block() {
    let cfg = tiny_config();
    let scene = generate_scene(11, &cfg).unwrap();
    let weights = BackboneWeights::seeded(11, &cfg.weights_spec());
    let table =
        build_pseudo_depth_table(cfg.blocks.pseudo_grid_shape, cfg.range(), &scene.rig).unwrap();
    let inputs = BackboneInputs {
        cloud: &scene.cloud,
        images: &scene.images,
        rig: &scene.rig,
        table: Some(&table),
    };
    let run = run_backbone(&inputs, &cfg.backbone_params(true), &weights, DispatchMode::Parallel)
        .unwrap();
    assert_eq!(run.intermediate.len(), cfg.blocks.sequence.len());
    let tokens = run.lidar_tokens + run.image_tokens;
    for snap in &run.intermediate {
        assert_eq!(snap.dim(), (tokens, cfg.tokenizer.channels));
    }
}
