use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unitr::attention::BackboneWeights;
use unitr::backbone::{run_backbone, BackboneInputs, BlockKind, DispatchMode};
use unitr::error::{Error, Result};
use unitr::geometry::{build_pseudo_depth_table, PseudoDepthTable};
use unitr::harness::checks::run_all_checks;
use unitr::harness::config::Config;
use unitr::harness::container::{TensorContainer, TensorData, TensorEntry};
use unitr::harness::manifest::{weights_manifest, RunManifest, RunTimings};
use unitr::harness::scene::generate_scene;
use unitr::harness::stats::block_partition_stats;
use unitr::tokenizers::{ImageStack, PointCloud};

#[derive(Parser)]
#[command(name = "unitr", about = "Unified camera-LiDAR set-attention backbone", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `default` or a path to a JSON config.
    #[arg(long, default_value = "default")]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the backbone on a synthetic scene and dump the BEV grid.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Use the serial reference dispatch grouping.
        #[arg(long)]
        serial: bool,
        /// Also dump weights and per-block token features.
        #[arg(long)]
        dump_intermediate: bool,
        /// Override the block sequence, e.g. `intra,inter3d,inter2d,inter2d`.
        #[arg(long)]
        blocks: Option<String>,
        /// Load `cloud.bin` and `images.utr` from a directory produced by
        /// `gen` instead of generating the scene.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Load a cached pseudo depth table (falls back to building one).
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Run the full invariant and acceptance suite.
    Check {
        #[command(flatten)]
        common: Common,
    },
    /// Print per-block partition statistics as JSON.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic scene to disk.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "scene")]
        out: PathBuf,
    },
    /// Build the pseudo depth table and cache it.
    Table {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "table.utr")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { common, out, serial, dump_intermediate, blocks, scene, table } => {
            cmd_run(&common, &out, serial, dump_intermediate, blocks.as_deref(), scene.as_deref(), table.as_deref())
        }
        Command::Check { common } => cmd_check(&common),
        Command::Stats { common, out } => cmd_stats(&common, out.as_deref()),
        Command::Gen { common, out } => cmd_gen(&common, &out),
        Command::Table { common, out } => cmd_table(&common, &out),
    }
}

fn load_config(common: &Common, blocks: Option<&str>) -> Result<Config> {
    let mut cfg = Config::resolve(&common.config)?;
    if let Some(list) = blocks {
        let sequence = list
            .split(',')
            .map(|s| match s.trim() {
                "intra" => Ok(BlockKind::Intra),
                "inter2d" => Ok(BlockKind::Inter2d),
                "inter3d" => Ok(BlockKind::Inter3d),
                other => Err(Error::Config(format!("unknown block kind `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        cfg.blocks.sequence = sequence;
        cfg.validate()?;
    }
    Ok(cfg)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    common: &Common,
    out: &Path,
    serial: bool,
    dump_intermediate: bool,
    blocks: Option<&str>,
    scene_dir: Option<&Path>,
    table_path: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = load_config(common, blocks)?;
    let mode = if serial { DispatchMode::Serial } else { DispatchMode::Parallel };
    std::fs::create_dir_all(out)?;

    let rig = cfg.build_rig()?;
    let (cloud, images) = match scene_dir {
        Some(dir) => {
            let cloud = PointCloud::from_bytes(
                &std::fs::read(dir.join("cloud.bin"))?,
                cfg.tokenizer.extra_feature_dim,
            )?;
            let images = load_images(&dir.join("images.utr"))?;
            (cloud, images)
        }
        None => {
            let scene = generate_scene(common.seed, &cfg)?;
            (scene.cloud, scene.images)
        }
    };

    let needs_table = cfg.blocks.sequence.contains(&BlockKind::Inter3d);
    let table = if needs_table {
        Some(load_or_build_table(&cfg, &rig, table_path)?)
    } else {
        None
    };

    let weights = BackboneWeights::seeded(common.seed, &cfg.weights_spec());
    let inputs =
        BackboneInputs { cloud: &cloud, images: &images, rig: &rig, table: table.as_ref() };
    let run = run_backbone(&inputs, &cfg.backbone_params(dump_intermediate), &weights, mode)?;

    run.bev.to_container().save(&out.join("bev.utr"))?;
    let manifest = RunManifest::new(&cfg, common.seed, mode, &run);
    std::fs::write(out.join("manifest.json"), manifest.to_json())?;
    std::fs::write(out.join("timings.json"), RunTimings::new(&run).to_json())?;
    if dump_intermediate {
        weights.to_container().save(&out.join("weights.utr"))?;
        std::fs::write(
            out.join("weights_manifest.json"),
            serde_json::to_string_pretty(&weights_manifest(&weights))?,
        )?;
        for (i, feats) in run.intermediate.iter().enumerate() {
            let mut c = TensorContainer::new();
            c.push(TensorEntry::f32(
                "features",
                vec![feats.nrows() as u64, feats.ncols() as u64],
                feats.as_slice().unwrap().to_vec(),
            ));
            c.save(&out.join(format!("block_{i}.utr")))?;
        }
    }

    println!(
        "run complete: {} lidar + {} image tokens, {} dispatches ({}), BEV {:?} with {} occupied cells",
        run.lidar_tokens,
        run.image_tokens,
        run.dispatches,
        if serial { "serial" } else { "parallel" },
        manifest.bev_shape,
        run.bev.occupancy(),
    );
    println!("artifacts written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(common: &Common) -> Result<ExitCode> {
    let cfg = Config::resolve(&common.config)?;
    let outcomes = run_all_checks(&cfg, common.seed)?;
    let mut failed = 0usize;
    for o in &outcomes {
        println!("{}", o.line());
        if !o.passed {
            failed += 1;
        }
    }
    println!(
        "{} checks, {} failed, total {:.1}s",
        outcomes.len(),
        failed,
        outcomes.iter().map(|o| o.millis as f64 / 1e3).sum::<f64>()
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_stats(common: &Common, out: Option<&Path>) -> Result<ExitCode> {
    let cfg = Config::resolve(&common.config)?;
    let scene = generate_scene(common.seed, &cfg)?;
    let weights = BackboneWeights::seeded(common.seed, &cfg.weights_spec());
    let lidar =
        unitr::tokenizers::voxelize(&scene.cloud, cfg.tokenizer.grid_size, cfg.range(), &weights)?;
    let image = unitr::tokenizers::patchify(&scene.images, cfg.tokenizer.patch_size, &weights)?;
    let tokens = unitr::tokenizers::TokenSequence::merged(lidar, image)?;
    let table = if cfg.blocks.sequence.contains(&BlockKind::Inter3d) {
        Some(build_pseudo_depth_table(cfg.blocks.pseudo_grid_shape, cfg.range(), &scene.rig)?)
    } else {
        None
    };
    let stats = block_partition_stats(&cfg, &tokens, &scene.rig, table.as_ref())?;
    let text = serde_json::to_string_pretty(&stats)?;
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen(common: &Common, out: &Path) -> Result<ExitCode> {
    let cfg = Config::resolve(&common.config)?;
    let scene = generate_scene(common.seed, &cfg)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("cloud.bin"), scene.cloud.to_bytes())?;

    let (b, h, w, _) = scene.images.pixels.dim();
    let mut images = TensorContainer::new();
    images.push(TensorEntry::f32(
        "pixels",
        vec![b as u64, h as u64, w as u64, 3],
        scene.images.pixels.as_slice().unwrap().to_vec(),
    ));
    images.save(&out.join("images.utr"))?;

    let mut truth = TensorContainer::new();
    let records = &scene.truth;
    truth.push(TensorEntry::i64(
        "point",
        vec![records.len() as u64],
        records.iter().map(|t| t.point as i64).collect(),
    ));
    truth.push(TensorEntry::i64(
        "view",
        vec![records.len() as u64],
        records.iter().map(|t| t.view as i64).collect(),
    ));
    let xyd: Vec<f64> = records.iter().flat_map(|t| [t.x, t.y, t.depth]).collect();
    truth.push(TensorEntry::i64(
        "pixel_xy_depth",
        vec![records.len() as u64, 3],
        unitr::harness::container::f64_bits(&xyd),
    ));
    truth.save(&out.join("truth.utr"))?;

    std::fs::write(out.join("config.json"), cfg.to_json_pretty())?;
    println!(
        "scene written to {}: {} points ({} camera-visible), {} views",
        out.display(),
        scene.cloud.len(),
        scene.truth.len(),
        scene.rig.view_count()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_table(common: &Common, out: &Path) -> Result<ExitCode> {
    let cfg = Config::resolve(&common.config)?;
    let rig = cfg.build_rig()?;
    let start = std::time::Instant::now();
    let table = build_pseudo_depth_table(cfg.blocks.pseudo_grid_shape, cfg.range(), &rig)?;
    let elapsed = start.elapsed();
    table.to_container().save(out)?;
    for view in table.empty_views() {
        eprintln!("warning: view {view} received no valid projections and cannot serve 3D fusion");
    }
    println!(
        "table written to {}: {} virtual points over grid {:?}, built in {:.1}s",
        out.display(),
        table.len(),
        table.grid_shape,
        elapsed.as_secs_f64()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_or_build_table(
    cfg: &Config,
    rig: &unitr::geometry::CameraRig,
    path: Option<&Path>,
) -> Result<PseudoDepthTable> {
    if let Some(p) = path {
        if p.exists() {
            let table = PseudoDepthTable::from_container(&TensorContainer::load(p)?)?;
            if table.rig_hash == rig.hash() && table.grid_shape == cfg.blocks.pseudo_grid_shape {
                return Ok(table);
            }
            eprintln!("warning: cached table at {} does not match config, rebuilding", p.display());
        }
    }
    let table = build_pseudo_depth_table(cfg.blocks.pseudo_grid_shape, cfg.range(), rig)?;
    if let Some(p) = path {
        table.to_container().save(p)?;
    }
    Ok(table)
}

fn load_images(path: &Path) -> Result<ImageStack> {
    let c = TensorContainer::load(path)?;
    let entry = c
        .get("pixels")
        .ok_or_else(|| Error::Container("images.utr lacks a `pixels` entry".into()))?;
    let dims: Vec<usize> = entry.dims.iter().map(|d| *d as usize).collect();
    if dims.len() != 4 || dims[3] != 3 {
        return Err(Error::BadShape(format!("pixels entry has dims {dims:?}")));
    }
    let data = match &entry.data {
        TensorData::F32(v) => v.clone(),
        _ => return Err(Error::Container("pixels entry must be f32".into())),
    };
    let pixels = ndarray::Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
        .map_err(|e| Error::BadShape(e.to_string()))?;
    Ok(ImageStack { pixels })
}
