//! C ABI over `sag-core`: load a checkpoint, run a forward pass, and turn
//! mask area ratios into guidance weights.
//!
//! Every fallible call returns a [`SagStatus`]. On failure the message is
//! kept per thread and read back with [`sag_last_error`]. Panics are caught
//! at the boundary and reported as [`SagStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ndarray::Array2;
use sag_core::grid::{MaskAreaRatios, PatchGrid};
use sag_core::guidance::{guidance_weights, GuidanceKind};
use sag_core::models::checkpoint::Checkpoint;
use sag_core::models::{AttentionKey, Bag, Model, ModelKind, ModelParams};
use sag_core::SagError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SagStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    NonFinite = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SagModelKind {
    Transformer = 0,
    Mil = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SagModelInfo {
    pub kind: SagModelKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_scales: usize,
    pub layers: usize,
    pub heads: usize,
}

/// Opaque model handle.
pub struct SagModel {
    model: Model,
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &SagError) -> SagStatus {
    match e {
        SagError::Shape { .. } | SagError::Bounds { .. } | SagError::Alignment(_) => SagStatus::Shape,
        SagError::NonFinite(_) | SagError::Diverged { .. } => SagStatus::NonFinite,
        SagError::Checkpoint(_) => SagStatus::Checkpoint,
        SagError::Io(_) => SagStatus::Io,
        _ => SagStatus::InvalidArgument,
    }
}

fn fail(status: SagStatus, msg: impl Into<String>) -> SagStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), SagStatus>) -> SagStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SagStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(SagStatus::Panic, msg)
        }
    }
}

fn core<T>(r: sag_core::Result<T>) -> Result<T, SagStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sag_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sag_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file. On success `*out` owns a handle to release with
/// [`sag_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sag_model_load(path: *const c_char, out: *mut *mut SagModel) -> SagStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(SagStatus::NullPointer, "path and out must be non-null"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(SagStatus::InvalidArgument, "path is not UTF-8"))?;
        let ck = core(Checkpoint::read(Path::new(path)))?;
        let model = core(Model::new(ck.arch))?;
        *out = Box::into_raw(Box::new(SagModel { model, params: ck.params }));
        Ok(())
    })
}

/// Releases a handle from [`sag_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sag_model_free(model: *mut SagModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sag_model_info(model: *const SagModel, out: *mut SagModelInfo) -> SagStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| fail(SagStatus::NullPointer, "model is null"))?;
        let out = out.as_mut().ok_or_else(|| fail(SagStatus::NullPointer, "out is null"))?;
        let a = &m.model.arch;
        *out = SagModelInfo {
            kind: match a.kind {
                ModelKind::Transformer => SagModelKind::Transformer,
                ModelKind::Mil => SagModelKind::Mil,
            },
            feature_dim: a.feature_dim,
            num_classes: a.num_classes,
            num_scales: a.num_scales,
            layers: a.layers,
            heads: a.heads,
        };
        Ok(())
    })
}

/// Forward pass on one slide.
///
/// `grid_shape` holds `(rows, cols)` for each of the model's scales, so
/// `2 * num_scales` entries. `features` holds each scale's `rows * cols`
/// by `feature_dim` matrix, row-major, scales back to back; `n_features`
/// is the total count. `logits` receives `num_classes` values. If
/// `attention` is non-null it receives, per scale, the last layer's mean
/// received attention averaged over heads, `sum(rows * cols)` values.
///
/// # Safety
/// Every pointer must reference at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn sag_model_forward(
    model: *const SagModel,
    features: *const f64,
    n_features: usize,
    grid_shape: *const usize,
    logits: *mut f64,
    n_logits: usize,
    attention: *mut f64,
    n_attention: usize,
) -> SagStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| fail(SagStatus::NullPointer, "model is null"))?;
        if features.is_null() || grid_shape.is_null() || logits.is_null() {
            return Err(fail(SagStatus::NullPointer, "features, grid_shape and logits must be non-null"));
        }
        let a = &m.model.arch;
        let shape = std::slice::from_raw_parts(grid_shape, 2 * a.num_scales);
        let grids = shape
            .chunks(2)
            .map(|rc| core(PatchGrid::new(rc[0], rc[1], 1)))
            .collect::<Result<Vec<_>, _>>()?;
        let total_p: usize = grids.iter().map(PatchGrid::len).sum();
        if n_features != total_p * a.feature_dim {
            return Err(fail(SagStatus::Shape, format!("expected {} feature values, got {n_features}", total_p * a.feature_dim)));
        }
        if n_logits != a.num_classes {
            return Err(fail(SagStatus::Shape, format!("expected {} logits, got {n_logits}", a.num_classes)));
        }
        if !attention.is_null() && n_attention != total_p {
            return Err(fail(SagStatus::Shape, format!("expected {total_p} attention values, got {n_attention}")));
        }
        let flat = std::slice::from_raw_parts(features, n_features);
        let mut offset = 0;
        let mut bags = Vec::with_capacity(grids.len());
        for (s, g) in grids.iter().enumerate() {
            let n = g.len() * a.feature_dim;
            let x = Array2::from_shape_vec((g.len(), a.feature_dim), flat[offset..offset + n].to_vec())
                .expect("length checked above");
            bags.push(core(Bag::new(x, 0, *g, s))?);
            offset += n;
        }
        let fwd = core(m.model.forward(&m.params, &bags))?;
        std::slice::from_raw_parts_mut(logits, n_logits).copy_from_slice(fwd.logits.as_slice().expect("contiguous"));
        if !attention.is_null() {
            let out = std::slice::from_raw_parts_mut(attention, n_attention);
            let (last, heads) = match a.kind {
                ModelKind::Transformer => (a.layers - 1, a.heads),
                ModelKind::Mil => (0, 1),
            };
            let mut offset = 0;
            for (s, g) in grids.iter().enumerate() {
                let dst = &mut out[offset..offset + g.len()];
                dst.fill(0.0);
                for h in 0..heads {
                    let ma = fwd.attention.get(AttentionKey::new(s, last, h)).expect("every head records attention");
                    dst.iter_mut().zip(ma).for_each(|(d, v)| *d += v / heads as f64);
                }
                offset += g.len();
            }
        }
        Ok(())
    })
}

/// Normalizes `n` nonnegative mask area ratios into guidance weights.
/// An all-zero input writes zeros and sets `*degenerate`.
///
/// # Safety
/// `ratios` and `weights` must reference `n` elements; `degenerate` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sag_guidance_weights(ratios: *const f64, n: usize, weights: *mut f64, degenerate: *mut bool) -> SagStatus {
    guard(|| {
        if ratios.is_null() || weights.is_null() || degenerate.is_null() {
            return Err(fail(SagStatus::NullPointer, "ratios, weights and degenerate must be non-null"));
        }
        let values = std::slice::from_raw_parts(ratios, n).to_vec();
        let grid = core(PatchGrid::new(1, n, 1))?;
        let w = core(guidance_weights(&MaskAreaRatios { values }, GuidanceKind::Heuristic, grid))?;
        std::slice::from_raw_parts_mut(weights, n).copy_from_slice(&w.weights);
        *degenerate = w.degenerate;
        Ok(())
    })
}
