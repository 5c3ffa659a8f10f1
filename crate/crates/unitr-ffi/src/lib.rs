//! C ABI over the backbone pipeline. Callers create an engine from a JSON
//! config, run it for a seed, and read the pooled BEV grid out of flat
//! buffers. Handles are opaque; every function returns a status code and
//! the last error message is queryable per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};

use unitr::attention::BackboneWeights;
use unitr::backbone::{run_backbone, BackboneInputs, BlockKind, DispatchMode};
use unitr::geometry::{build_pseudo_depth_table, CameraRig, PseudoDepthTable};
use unitr::harness::config::Config;
use unitr::harness::scene::generate_scene;

/// Status code of every FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    RunFailed = 4,
    BufferTooSmall = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into()).unwrap_or_else(|_| CString::new("error").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Message of the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn unitr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(c) => c.as_ptr(),
        None => std::ptr::null(),
    })
}

/// Opaque engine: parsed config, camera rig, weights, and the cached
/// pseudo depth table when the block sequence needs one.
pub struct UnitrEngine {
    cfg: Config,
    rig: CameraRig,
    weights: BackboneWeights,
    table: Option<PseudoDepthTable>,
    seed: u64,
}

/// Create an engine. `config_json` may be NULL for the default
/// configuration. On success writes the handle to `out_engine`.
///
/// # Safety
/// `config_json`, when non-NULL, must point to a NUL-terminated string;
/// `out_engine` must point to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn unitr_engine_create(
    config_json: *const c_char,
    seed: u64,
    out_engine: *mut *mut UnitrEngine,
) -> UnitrStatus {
    if out_engine.is_null() {
        set_error("out_engine is NULL");
        return UnitrStatus::NullPointer;
    }
    let cfg = if config_json.is_null() {
        Config::default()
    } else {
        let text = match CStr::from_ptr(config_json).to_str() {
            Ok(t) => t,
            Err(e) => {
                set_error(format!("config is not UTF-8: {e}"));
                return UnitrStatus::InvalidUtf8;
            }
        };
        match serde_json::from_str::<Config>(text).map_err(unitr::Error::from).and_then(|c| {
            c.validate()?;
            Ok(c)
        }) {
            Ok(c) => c,
            Err(e) => {
                set_error(format!("invalid config: {e}"));
                return UnitrStatus::InvalidConfig;
            }
        }
    };
    let rig = match cfg.build_rig() {
        Ok(r) => r,
        Err(e) => {
            set_error(format!("invalid rig: {e}"));
            return UnitrStatus::InvalidConfig;
        }
    };
    let table = if cfg.blocks.sequence.contains(&BlockKind::Inter3d) {
        match build_pseudo_depth_table(cfg.blocks.pseudo_grid_shape, cfg.range(), &rig) {
            Ok(t) => Some(t),
            Err(e) => {
                set_error(format!("depth table: {e}"));
                return UnitrStatus::InvalidConfig;
            }
        }
    } else {
        None
    };
    let weights = BackboneWeights::seeded(seed, &cfg.weights_spec());
    let engine = Box::new(UnitrEngine { cfg, rig, weights, table, seed });
    *out_engine = Box::into_raw(engine);
    UnitrStatus::Ok
}

/// Destroy an engine created by [`unitr_engine_create`]. NULL is a no-op.
///
/// # Safety
/// `engine` must be a pointer returned by `unitr_engine_create` that has
/// not been destroyed yet.
#[no_mangle]
pub unsafe extern "C" fn unitr_engine_destroy(engine: *mut UnitrEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// BEV grid dimensions: grid x, grid y, channels.
///
/// # Safety
/// All pointers must be valid for writes of one `usize` each.
#[no_mangle]
pub unsafe extern "C" fn unitr_engine_bev_dims(
    engine: *const UnitrEngine,
    out_x: *mut usize,
    out_y: *mut usize,
    out_channels: *mut usize,
) -> UnitrStatus {
    if engine.is_null() || out_x.is_null() || out_y.is_null() || out_channels.is_null() {
        set_error("NULL pointer argument");
        return UnitrStatus::NullPointer;
    }
    let e = &*engine;
    let ext = e.cfg.range().extent();
    *out_x = (ext[0] / e.cfg.tokenizer.grid_size[0] - 1e-9).ceil() as usize;
    *out_y = (ext[1] / e.cfg.tokenizer.grid_size[1] - 1e-9).ceil() as usize;
    *out_channels = e.cfg.tokenizer.channels;
    UnitrStatus::Ok
}

/// Run the backbone on the engine's synthetic scene for `scene_seed` and
/// copy the BEV features (row-major x, y, channel) into `out_features`.
/// `len` must be at least x*y*channels. Optionally reports the attention
/// dispatch count.
///
/// # Safety
/// `out_features` must point to `len` writable f32 values;
/// `out_dispatches`, when non-NULL, must be writable.
#[no_mangle]
pub unsafe extern "C" fn unitr_engine_run(
    engine: *const UnitrEngine,
    scene_seed: u64,
    serial: bool,
    out_features: *mut f32,
    len: usize,
    out_dispatches: *mut u64,
) -> UnitrStatus {
    if engine.is_null() || out_features.is_null() {
        set_error("NULL pointer argument");
        return UnitrStatus::NullPointer;
    }
    let e = &*engine;
    let scene = match generate_scene(scene_seed, &e.cfg) {
        Ok(s) => s,
        Err(err) => {
            set_error(format!("scene: {err}"));
            return UnitrStatus::RunFailed;
        }
    };
    let inputs = BackboneInputs {
        cloud: &scene.cloud,
        images: &scene.images,
        rig: &e.rig,
        table: e.table.as_ref(),
    };
    let mode = if serial { DispatchMode::Serial } else { DispatchMode::Parallel };
    let run = match run_backbone(&inputs, &e.cfg.backbone_params(false), &e.weights, mode) {
        Ok(r) => r,
        Err(err) => {
            set_error(format!("run: {err}"));
            return UnitrStatus::RunFailed;
        }
    };
    let flat = run.bev.features.as_slice().expect("bev features are contiguous");
    if len < flat.len() {
        set_error(format!("buffer holds {len} values, need {}", flat.len()));
        return UnitrStatus::BufferTooSmall;
    }
    std::ptr::copy_nonoverlapping(flat.as_ptr(), out_features, flat.len());
    if !out_dispatches.is_null() {
        *out_dispatches = run.dispatches;
    }
    UnitrStatus::Ok
}

/// Seed the engine was created with (weights seed).
///
/// # Safety
/// `engine` must be a live engine pointer.
#[no_mangle]
pub unsafe extern "C" fn unitr_engine_seed(engine: *const UnitrEngine) -> u64 {
    if engine.is_null() {
        return 0;
    }
    (*engine).seed
}
