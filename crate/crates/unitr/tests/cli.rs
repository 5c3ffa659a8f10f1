//! Exercise the installed binary end to end: exit codes, artifacts on
//! disk, and the scene/table file interfaces.

use std::process::Command;

fn unitr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unitr"))
}

fn tiny_config_file(dir: &std::path::Path) -> std::path::PathBuf {
    let mut cfg = unitr::harness::config::Config::default();
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
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_json_pretty()).unwrap();
    path
}

#[test]
fn usage_errors_exit_two() {
    let status = unitr().arg("no-such-subcommand").status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn run_writes_bev_manifest_and_timings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_file(dir.path());
    let out = dir.path().join("out");
    let output = unitr()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "4", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    for f in ["bev.utr", "manifest.json", "timings.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["dispatches"], 8);
    assert_eq!(manifest["mode"], "parallel");

    // Same seed and config again: byte-identical artifacts.
    let out2 = dir.path().join("out2");
    let status = unitr()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "4", "--out"])
        .arg(&out2)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        std::fs::read(out.join("bev.utr")).unwrap(),
        std::fs::read(out2.join("bev.utr")).unwrap()
    );
    assert_eq!(
        std::fs::read(out.join("manifest.json")).unwrap(),
        std::fs::read(out2.join("manifest.json")).unwrap()
    );
}

#[test]
fn serial_flag_switches_dispatch_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_file(dir.path());
    let out = dir.path().join("serial");
    let status = unitr()
        .args(["run", "--serial", "--config"])
        .arg(&cfg)
        .args(["--seed", "4", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["dispatches"], 14);
    assert_eq!(manifest["expected_dispatches"], 14);
    assert_eq!(manifest["mode"], "serial");
}

#[test]
fn gen_then_run_from_scene_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_file(dir.path());
    let scene_dir = dir.path().join("scene");
    let status = unitr()
        .args(["gen", "--config"])
        .arg(&cfg)
        .args(["--seed", "4", "--out"])
        .arg(&scene_dir)
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["cloud.bin", "images.utr", "truth.utr", "config.json"] {
        assert!(scene_dir.join(f).exists(), "missing {f}");
    }

    // Running from the generated files reproduces the generated run.
    let from_files = dir.path().join("from_files");
    let status = unitr()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "4", "--scene"])
        .arg(&scene_dir)
        .args(["--out"])
        .arg(&from_files)
        .status()
        .unwrap();
    assert!(status.success());
    let from_seed = dir.path().join("from_seed");
    let status = unitr()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "4", "--out"])
        .arg(&from_seed)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        std::fs::read(from_files.join("bev.utr")).unwrap(),
        std::fs::read(from_seed.join("bev.utr")).unwrap()
    );
}

#[test]
fn table_subcommand_caches_and_run_reuses_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_file(dir.path());
    let table = dir.path().join("table.utr");
    let status = unitr()
        .args(["table", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&table)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(table.exists());

    let out = dir.path().join("cached");
    let status = unitr()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "4", "--table"])
        .arg(&table)
        .args(["--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn stats_reports_every_block() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_file(dir.path());
    let output = unitr()
        .args(["stats", "--config"])
        .arg(&cfg)
        .args(["--seed", "4"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let v: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(v["blocks"].as_array().unwrap().len(), 4);
    assert_eq!(v["blocks"][0]["kind"], "intra");
    assert!(v["blocks"][1]["merged"]["duplication_rate"].is_number());
}

#[test]
fn blocks_override_changes_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_file(dir.path());
    let out = dir.path().join("swapped");
    let status = unitr()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "4", "--blocks", "intra,inter3d,inter2d,inter2d", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(
        manifest["block_sequence"],
        serde_json::json!(["intra", "inter3d", "inter2d", "inter2d"])
    );
}
