//! C ABI over the lrod pipeline: checkpoint loading, detection, restoration
//! and input-space spectral norms behind opaque handles.
//!
//! Conventions: every fallible call returns a status code; `lrod_last_error`
//! describes the most recent failure on the calling thread. Images are dense
//! row-major f64 buffers of shape [3, height, width] with values in [0, 1].
//! Handles are freed exactly once with their `_free` function; passing null
//! anywhere is reported as `LROD_STATUS_NULL_ARGUMENT`, never undefined
//! behaviour.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use lrod::lipschitz::{input_spectral_norm, PowerIterConfig};
use lrod::model::{
    decode_boxes, detector_forward, load_checkpoint, restorer_forward, CheckpointHeader,
};
use lrod::tape::Tape;
use lrod::tensor::Tensor;
use lrod::train::nms;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LrodStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Runtime = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lrod_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// A loaded checkpoint: parameter layout plus the flat parameter vector.
pub struct LrodModel {
    header: CheckpointHeader,
    params: Tensor,
}

/// Decoded, suppressed detections for one image.
pub struct LrodDetections {
    boxes: Vec<lrod::model::DetBox>,
}

/// One detection in image coordinates.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct LrodBox {
    pub class_id: u32,
    pub score: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

fn guard<F: FnOnce() -> LrodStatus>(f: F) -> LrodStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            LrodStatus::Runtime
        }
    }
}

fn has_prefix(model: &LrodModel, prefix: &str) -> bool {
    model.header.layout.segments.iter().any(|s| s.name.starts_with(prefix))
}

unsafe fn image_from_raw(ptr: *const f64, height: usize, width: usize) -> Option<Tensor> {
    if ptr.is_null() || height == 0 || width == 0 {
        return None;
    }
    let data = std::slice::from_raw_parts(ptr, 3 * height * width).to_vec();
    Tensor::new(vec![3, height, width], data).ok()
}

/// Load a checkpoint written by the `lrod` trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lrod_model_load(
    path: *const c_char,
    out: *mut *mut LrodModel,
) -> LrodStatus {
    if path.is_null() || out.is_null() {
        set_error("null argument to lrod_model_load");
        return LrodStatus::NullArgument;
    }
    guard(|| {
        let path = match CStr::from_ptr(path).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("checkpoint path is not valid utf-8");
                return LrodStatus::InvalidArgument;
            }
        };
        match load_checkpoint(std::path::Path::new(path)) {
            Ok((header, params)) => {
                *out = Box::into_raw(Box::new(LrodModel { header, params }));
                LrodStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                LrodStatus::Io
            }
        }
    })
}

/// # Safety
/// `model` must come from `lrod_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lrod_model_free(model: *mut LrodModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of parameters in the loaded model.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lrod_model_param_count(
    model: *const LrodModel,
    out: *mut usize,
) -> LrodStatus {
    if model.is_null() || out.is_null() {
        set_error("null argument to lrod_model_param_count");
        return LrodStatus::NullArgument;
    }
    *out = (*model).params.len();
    LrodStatus::Ok
}

/// Copy the checkpoint's mode tag into `buf` (NUL-terminated, truncated to
/// `cap` bytes).
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lrod_model_mode(
    model: *const LrodModel,
    buf: *mut c_char,
    cap: usize,
) -> LrodStatus {
    if model.is_null() || buf.is_null() || cap == 0 {
        set_error("null argument to lrod_model_mode");
        return LrodStatus::NullArgument;
    }
    let mode = (*model).header.mode.as_bytes();
    let n = mode.len().min(cap - 1);
    std::ptr::copy_nonoverlapping(mode.as_ptr() as *const c_char, buf, n);
    *buf.add(n) = 0;
    LrodStatus::Ok
}

/// Run the detector on one image and return decoded, NMS-filtered boxes.
///
/// # Safety
/// `image` must hold `3 * height * width` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lrod_model_detect(
    model: *const LrodModel,
    image: *const f64,
    height: usize,
    width: usize,
    score_threshold: f64,
    nms_iou: f64,
    out: *mut *mut LrodDetections,
) -> LrodStatus {
    if model.is_null() || out.is_null() {
        set_error("null argument to lrod_model_detect");
        return LrodStatus::NullArgument;
    }
    let img = match image_from_raw(image, height, width) {
        Some(t) => t,
        None => {
            set_error("image buffer is null or has zero extent");
            return LrodStatus::NullArgument;
        }
    };
    guard(|| {
        let model = &*model;
        if !has_prefix(model, "detect.") {
            set_error("checkpoint has no detection head");
            return LrodStatus::InvalidArgument;
        }
        let num_classes = detect_classes(model);
        let mut tape = Tape::new();
        let run = (|| -> lrod::Result<Tensor> {
            let x = tape.constant(img.clone())?;
            let p = tape.constant(model.params.clone())?;
            let det = detector_forward(&mut tape, x, p, &model.header.layout)?;
            Ok(tape.value(det).clone())
        })();
        match run {
            Ok(det) => {
                let boxes = nms(
                    decode_boxes(&det, num_classes, height, width, score_threshold),
                    nms_iou,
                );
                *out = Box::into_raw(Box::new(LrodDetections { boxes }));
                LrodStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                LrodStatus::Runtime
            }
        }
    })
}

fn detect_classes(model: &LrodModel) -> usize {
    // detect head output channels are 1 + classes + 4
    model
        .header
        .layout
        .segments
        .iter()
        .find(|s| s.name == "detect.c2.b")
        .map(|s| s.shape[0].saturating_sub(5))
        .unwrap_or(0)
}

/// # Safety
/// `dets` must come from `lrod_model_detect` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lrod_detections_free(dets: *mut LrodDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Number of boxes in a detection result. Null yields 0.
///
/// # Safety
/// `dets` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn lrod_detections_len(dets: *const LrodDetections) -> usize {
    if dets.is_null() {
        0
    } else {
        (*dets).boxes.len()
    }
}

/// Fetch one box by index.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lrod_detections_get(
    dets: *const LrodDetections,
    index: usize,
    out: *mut LrodBox,
) -> LrodStatus {
    if dets.is_null() || out.is_null() {
        set_error("null argument to lrod_detections_get");
        return LrodStatus::NullArgument;
    }
    let boxes = &(*dets).boxes;
    match boxes.get(index) {
        Some(b) => {
            *out = LrodBox {
                class_id: b.class_id as u32,
                score: b.score,
                x_min: b.x_min,
                y_min: b.y_min,
                x_max: b.x_max,
                y_max: b.y_max,
            };
            LrodStatus::Ok
        }
        None => {
            set_error("detection index out of range");
            LrodStatus::InvalidArgument
        }
    }
}

/// Restore one degraded image in place of `out_image` (same layout as input).
///
/// # Safety
/// Both image buffers must hold `3 * height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn lrod_model_restore(
    model: *const LrodModel,
    image: *const f64,
    height: usize,
    width: usize,
    out_image: *mut f64,
) -> LrodStatus {
    if model.is_null() || out_image.is_null() {
        set_error("null argument to lrod_model_restore");
        return LrodStatus::NullArgument;
    }
    let img = match image_from_raw(image, height, width) {
        Some(t) => t,
        None => {
            set_error("image buffer is null or has zero extent");
            return LrodStatus::NullArgument;
        }
    };
    guard(|| {
        let model = &*model;
        if !has_prefix(model, "restore.") {
            set_error("checkpoint has no restoration head");
            return LrodStatus::InvalidArgument;
        }
        let mut tape = Tape::new();
        let run = (|| -> lrod::Result<Tensor> {
            let x = tape.constant(img.clone())?;
            let p = tape.constant(model.params.clone())?;
            let r = restorer_forward(&mut tape, x, p, &model.header.layout)?;
            Ok(tape.value(r).clone())
        })();
        match run {
            Ok(restored) => {
                std::ptr::copy_nonoverlapping(
                    restored.data().as_ptr(),
                    out_image,
                    restored.len(),
                );
                LrodStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                LrodStatus::Runtime
            }
        }
    })
}

/// Power-iteration estimate of the detector's input Jacobian spectral norm
/// at one image.
///
/// # Safety
/// `image` must hold `3 * height * width` doubles; `out_sigma` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lrod_spectral_norm(
    model: *const LrodModel,
    image: *const f64,
    height: usize,
    width: usize,
    max_iters: u32,
    tol: f64,
    seed: u64,
    out_sigma: *mut f64,
) -> LrodStatus {
    if model.is_null() || out_sigma.is_null() {
        set_error("null argument to lrod_spectral_norm");
        return LrodStatus::NullArgument;
    }
    if max_iters == 0 || !(tol > 0.0) {
        set_error("max_iters must be >= 1 and tol > 0");
        return LrodStatus::InvalidArgument;
    }
    let img = match image_from_raw(image, height, width) {
        Some(t) => t,
        None => {
            set_error("image buffer is null or has zero extent");
            return LrodStatus::NullArgument;
        }
    };
    guard(|| {
        let model = &*model;
        if !has_prefix(model, "detect.") {
            set_error("checkpoint has no detection head");
            return LrodStatus::InvalidArgument;
        }
        let params = model.params.clone();
        let layout = model.header.layout.clone();
        let f = move |tape: &mut Tape, x| {
            let p = tape.constant(params.clone())?;
            detector_forward(tape, x, p, &layout)
        };
        let cfg = PowerIterConfig { max_iters: max_iters as usize, tol, seed };
        match input_spectral_norm(&f, &img, &cfg) {
            Ok(est) => {
                *out_sigma = est.sigma;
                LrodStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                LrodStatus::Runtime
            }
        }
    })
}
