//! C ABI for the primgraph pipeline.
//!
//! The surface follows the usual opaque-handle pattern: constructors return
//! a status code and write the handle through an out-pointer, every handle
//! has a matching `_free`, and the last error message of the calling thread
//! is available from [`pg_last_error`]. The header `include/primgraph.h` is
//! generated by cbindgen at build time.

use primgraph::geometry::{voxelize, GridSpec, Primitive};
use primgraph::metrics::{set_distance, voxel_iou, ShapeSet};
use primgraph::model::{CheckpointMeta, Model};
use primgraph::nn::ParameterStore;
use primgraph::training::model_from_checkpoint;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgStatus {
    Ok = 0,
    InvalidArgument = 1,
    IoError = 2,
    ParseError = 3,
    RuntimeError = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg
        .chars()
        .map(|c| if c == '\0' { ' ' } else { c })
        .collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &primgraph::Error) -> PgStatus {
    use primgraph::Error as E;
    match err {
        E::InvalidParameter(_) | E::ShapeMismatch(_) | E::EmptyInput(_) | E::Config(_) => {
            PgStatus::InvalidArgument
        }
        E::Parse(_) => PgStatus::ParseError,
        E::Io(_) | E::Checkpoint(_) => PgStatus::IoError,
        E::UndefinedMetric(_) => PgStatus::RuntimeError,
    }
}

/// Opaque handle: a loaded checkpoint with its metadata and wiring.
pub struct PgModel {
    store: ParameterStore,
    meta: CheckpointMeta,
    model: Model,
}

/// Opaque handle: a set of labeled primitives.
pub struct PgShape {
    shape: ShapeSet,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the calling thread's most recent error. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint (with its sidecar metadata) into a model handle.
///
/// # Safety
/// `ckpt_path` must be a valid NUL-terminated string and `out` a valid
/// pointer; the returned handle must be released with [`pg_model_free`].
#[no_mangle]
pub unsafe extern "C" fn pg_model_load(
    ckpt_path: *const c_char,
    out: *mut *mut PgModel,
) -> PgStatus {
    if ckpt_path.is_null() || out.is_null() {
        set_error("pg_model_load: null argument");
        return PgStatus::InvalidArgument;
    }
    let path = match CStr::from_ptr(ckpt_path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("pg_model_load: path is not valid UTF-8");
            return PgStatus::InvalidArgument;
        }
    };
    let load = || -> primgraph::Result<PgModel> {
        let store = ParameterStore::load(Path::new(path))?;
        let meta = CheckpointMeta::load(Path::new(path))?;
        let model = model_from_checkpoint(&store, &meta)?;
        Ok(PgModel { store, meta, model })
    };
    match load() {
        Ok(m) => {
            *out = Box::into_raw(Box::new(m));
            PgStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Releases a model handle. A null pointer is a no-op.
///
/// # Safety
/// `model` must have come from [`pg_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pg_model_free(model: *mut PgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Semantic class count M_c of the loaded model.
///
/// # Safety
/// `model` must be a live handle from [`pg_model_load`].
#[no_mangle]
pub unsafe extern "C" fn pg_model_class_count(model: *const PgModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).meta.config.class_count
}

/// Expected square input image side of the loaded model.
///
/// # Safety
/// `model` must be a live handle from [`pg_model_load`].
#[no_mangle]
pub unsafe extern "C" fn pg_model_image_size(model: *const PgModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).meta.config.image_size as u32
}

/// Runs full-image inference on a row-major depth raster (32-bit floats,
/// 0 = background) and returns the predicted shape. An all-background
/// prediction yields an empty shape and `Ok`.
///
/// # Safety
/// `depth` must point to `width * height` readable floats; `model` and
/// `out` must be valid. The shape must be released with [`pg_shape_free`].
#[no_mangle]
pub unsafe extern "C" fn pg_model_predict_depth(
    model: *const PgModel,
    depth: *const f32,
    width: u32,
    height: u32,
    out: *mut *mut PgShape,
) -> PgStatus {
    if model.is_null() || depth.is_null() || out.is_null() {
        set_error("pg_model_predict_depth: null argument");
        return PgStatus::InvalidArgument;
    }
    let m = &*model;
    let side = m.meta.config.image_size as u32;
    if width != side || height != side {
        set_error(&format!(
            "pg_model_predict_depth: model expects {side}x{side}, got {width}x{height}"
        ));
        return PgStatus::InvalidArgument;
    }
    let raster = std::slice::from_raw_parts(depth, (width * height) as usize);
    match m
        .model
        .predict(&m.store, raster, &m.meta.norm_mean, &m.meta.norm_std)
    {
        Ok(outcome) => {
            *out = Box::into_raw(Box::new(PgShape {
                shape: outcome.shape,
            }));
            PgStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Builds a shape from `count` rows of 10 doubles each: a semantic label
/// followed by the 9 box parameters (lengths, translation, Euler angles).
///
/// # Safety
/// `rows` must point to `count * 10` readable doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pg_shape_from_params(
    rows: *const f64,
    count: usize,
    out: *mut *mut PgShape,
) -> PgStatus {
    if rows.is_null() || out.is_null() {
        set_error("pg_shape_from_params: null argument");
        return PgStatus::InvalidArgument;
    }
    let data = std::slice::from_raw_parts(rows, count * 10);
    let mut prims = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for row in data.chunks_exact(10) {
        if row[0] < 0.0 || row[0].fract() != 0.0 {
            set_error(&format!("pg_shape_from_params: bad label {}", row[0]));
            return PgStatus::InvalidArgument;
        }
        labels.push(row[0] as u32);
        let mut p = [0.0; 9];
        p.copy_from_slice(&row[1..]);
        match Primitive::from_params(&p) {
            Ok(prim) => prims.push(prim),
            Err(e) => {
                set_error(&e.to_string());
                return PgStatus::InvalidArgument;
            }
        }
    }
    match ShapeSet::with_labels(prims, labels) {
        Ok(shape) => {
            *out = Box::into_raw(Box::new(PgShape { shape }));
            PgStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Number of primitives in a shape.
///
/// # Safety
/// `shape` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pg_shape_len(shape: *const PgShape) -> usize {
    if shape.is_null() {
        return 0;
    }
    (*shape).shape.len()
}

/// Copies primitive `index` into `out10` as [label, 9 parameters].
///
/// # Safety
/// `shape` must be live and `out10` point to 10 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_shape_primitive(
    shape: *const PgShape,
    index: usize,
    out10: *mut f64,
) -> PgStatus {
    if shape.is_null() || out10.is_null() {
        set_error("pg_shape_primitive: null argument");
        return PgStatus::InvalidArgument;
    }
    let s = &(*shape).shape;
    if index >= s.len() {
        set_error(&format!(
            "pg_shape_primitive: index {index} out of range for {} primitives",
            s.len()
        ));
        return PgStatus::InvalidArgument;
    }
    let labeled = s.labeled();
    let (label, prim) = &labeled[index];
    let dst = std::slice::from_raw_parts_mut(out10, 10);
    dst[0] = *label as f64;
    dst[1..].copy_from_slice(&prim.params());
    PgStatus::Ok
}

/// Releases a shape handle. A null pointer is a no-op.
///
/// # Safety
/// `shape` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pg_shape_free(shape: *mut PgShape) {
    if !shape.is_null() {
        drop(Box::from_raw(shape));
    }
}

/// Rasterizes a shape onto the default [-0.5, 0.5]^3 extent at the given
/// resolution, writing `resolution^3` occupancy bytes (0/1, row-major over
/// x, y, z).
///
/// # Safety
/// `out_occupancy` must point to `resolution^3` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pg_shape_voxelize(
    shape: *const PgShape,
    resolution: u32,
    out_occupancy: *mut u8,
) -> PgStatus {
    if shape.is_null() || out_occupancy.is_null() {
        set_error("pg_shape_voxelize: null argument");
        return PgStatus::InvalidArgument;
    }
    if resolution == 0 {
        set_error("pg_shape_voxelize: resolution must be positive");
        return PgStatus::InvalidArgument;
    }
    let spec = GridSpec::with_resolution(resolution as usize);
    match voxelize((*shape).shape.primitives(), &spec) {
        Ok(grid) => {
            let n = grid.occupancy().len();
            let dst = std::slice::from_raw_parts_mut(out_occupancy, n);
            for (d, &v) in dst.iter_mut().zip(grid.occupancy()) {
                *d = v as u8;
            }
            PgStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Voxel IoU (percent) of two shapes on the default extent.
///
/// # Safety
/// All pointers must be valid; `out` receives the percentage.
#[no_mangle]
pub unsafe extern "C" fn pg_shape_iou(
    a: *const PgShape,
    b: *const PgShape,
    resolution: u32,
    out: *mut f64,
) -> PgStatus {
    if a.is_null() || b.is_null() || out.is_null() || resolution == 0 {
        set_error("pg_shape_iou: null or zero argument");
        return PgStatus::InvalidArgument;
    }
    let spec = GridSpec::with_resolution(resolution as usize);
    let compute = || -> primgraph::Result<f64> {
        let ga = voxelize((*a).shape.primitives(), &spec)?;
        let gb = voxelize((*b).shape.primitives(), &spec)?;
        voxel_iou(&ga, &gb)
    };
    match compute() {
        Ok(v) => {
            *out = v;
            PgStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Symmetric Hausdorff error of one shape pair:
/// `(D(a, b) + D(b, a)) / 2` over corner-set distances.
///
/// # Safety
/// All pointers must be valid; `out` receives the distance.
#[no_mangle]
pub unsafe extern "C" fn pg_shape_herr(
    a: *const PgShape,
    b: *const PgShape,
    out: *mut f64,
) -> PgStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        set_error("pg_shape_herr: null argument");
        return PgStatus::InvalidArgument;
    }
    let compute = || -> primgraph::Result<f64> {
        let fwd = set_distance(&(*a).shape, &(*b).shape)?;
        let rev = set_distance(&(*b).shape, &(*a).shape)?;
        Ok((fwd + rev) / 2.0)
    };
    match compute() {
        Ok(v) => {
            *out = v;
            PgStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}
