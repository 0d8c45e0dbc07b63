//! C ABI over the evprompt toolkit.
//!
//! Every fallible function returns an [`EvpStatus`]. On failure the message is kept in a
//! thread-local slot readable with [`evp_last_error`]. Handles are opaque and must be
//! released with their matching `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use evprompt::backbone::NoHook;
use evprompt::events::{parse_event_file, voxelize, EventStream};
use evprompt::freq::{frequency_filter, Transform};
use evprompt::model::{Model, SampleInput};
use evprompt::numerics::Tensor;
use evprompt::pipeline::load_checkpoint;
use evprompt::train::{compute_metrics, weighted_bce, weighted_bce_grad};
use evprompt::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Config = 4,
    Parse = 5,
    Data = 6,
    Shape = 7,
    Degenerate = 8,
    Io = 9,
    Panic = 10,
}

/// Frequency transform selector for [`evp_lowpass`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvpTransform {
    Dct = 0,
    Dft = 1,
    None = 2,
}

/// Aggregate multi-label metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvpMetrics {
    pub ma: f64,
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Opaque parsed event stream.
pub struct EvpEvents(EventStream);

/// Opaque model loaded from a checkpoint.
pub struct EvpModel(Model<f32>);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(EvpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Shape { .. } => EvpStatus::Shape,
            Error::Config(_) => EvpStatus::Config,
            Error::Parse { .. } | Error::Json(_) => EvpStatus::Parse,
            Error::Data(_) => EvpStatus::Data,
            Error::Degenerate(_) => EvpStatus::Degenerate,
            Error::Io { .. } => EvpStatus::Io,
        };
        Fail(status, e.to_string())
    }
}

fn fail(status: EvpStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EvpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            EvpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            EvpStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(fail(EvpStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Borrows `len` elements at `p`; an empty slice needs no valid pointer.
///
/// # Safety
/// Non-empty ranges must be readable for `len` elements.
unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// Non-empty ranges must be writable for `len` elements.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path(p: *const c_char, name: &str) -> Result<PathBuf, Fail> {
    non_null(p, name)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EvpStatus::InvalidArgument, format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn need(out_len: usize, needed: usize) -> Result<(), Fail> {
    if out_len < needed {
        return Err(fail(
            EvpStatus::BufferTooSmall,
            format!("output holds {out_len} values, {needed} needed"),
        ));
    }
    Ok(())
}

fn checked_mul(dims: &[usize]) -> Result<usize, Fail> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(EvpStatus::InvalidArgument, "dimensions overflow"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn evp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated, truncated to
/// fit) and returns the full message length in bytes, excluding the NUL. `buf` may be null
/// when `len` is 0, which queries the length.
///
/// # Safety
/// `buf` must be writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn evp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Parses an in-memory `EVS1` event file.
///
/// # Safety
/// `bytes` must be readable for `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn evp_events_parse(bytes: *const u8, len: usize, out: *mut *mut EvpEvents) -> EvpStatus {
    guard(|| {
        non_null(out, "out")?;
        let stream = parse_event_file(slice(bytes, len, "bytes")?)?;
        *out = Box::into_raw(Box::new(EvpEvents(stream)));
        Ok(())
    })
}

/// Reads an `EVS1` event file from disk.
///
/// # Safety
/// `file` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn evp_events_read(file: *const c_char, out: *mut *mut EvpEvents) -> EvpStatus {
    guard(|| {
        non_null(out, "out")?;
        let stream = EventStream::read_file(path(file, "file")?)?;
        *out = Box::into_raw(Box::new(EvpEvents(stream)));
        Ok(())
    })
}

/// Writes the event count and sensor size. Any output pointer may be null.
///
/// # Safety
/// `events` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn evp_events_info(
    events: *const EvpEvents,
    count: *mut usize,
    width: *mut usize,
    height: *mut usize,
) -> EvpStatus {
    guard(|| {
        non_null(events, "events")?;
        let s = &(*events).0;
        for (p, v) in [(count, s.len()), (width, s.width()), (height, s.height())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Releases an event handle. Null is ignored.
///
/// # Safety
/// `events` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn evp_events_free(events: *mut EvpEvents) {
    if !events.is_null() {
        drop(Box::from_raw(events));
    }
}

/// Voxelizes the stream into `frames × 3 × H × W` values at the sensor size.
///
/// # Safety
/// `events` must be a live handle; `out` must be writable for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn evp_voxelize(
    events: *const EvpEvents,
    frames: usize,
    out: *mut f32,
    out_len: usize,
) -> EvpStatus {
    guard(|| {
        non_null(events, "events")?;
        let s = &(*events).0;
        let v = voxelize::<f32>(s, frames, s.height(), s.width())?;
        need(out_len, v.data.len())?;
        slice_mut(out, v.data.len(), "out")?.copy_from_slice(v.data.data());
        Ok(())
    })
}

/// Low-pass filters a `C × H × W` map, keeping the lowest `keep_fraction` of frequencies
/// per axis. `transform` is an [`EvpTransform`] value. `input` and `out` may alias.
///
/// # Safety
/// `input` must be readable and `out` writable for `C·H·W` floats.
#[no_mangle]
pub unsafe extern "C" fn evp_lowpass(
    input: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    keep_fraction: f64,
    transform: u32,
    out: *mut f32,
) -> EvpStatus {
    guard(|| {
        let n = checked_mul(&[channels, height, width])?;
        let x = Tensor::new(vec![channels, height, width], slice(input, n, "input")?.to_vec())?;
        let t = match transform {
            t if t == EvpTransform::Dct as u32 => Transform::Dct,
            t if t == EvpTransform::Dft as u32 => Transform::Dft,
            t if t == EvpTransform::None as u32 => Transform::None,
            other => return Err(fail(EvpStatus::InvalidArgument, format!("unknown transform {other}"))),
        };
        let y = frequency_filter(&x, keep_fraction, t)?;
        slice_mut(out, n, "out")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Loads a checkpoint directory. `bank_dir` may be null to use the checkpoint's own bank.
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn evp_model_load(
    checkpoint_dir: *const c_char,
    bank_dir: *const c_char,
    out: *mut *mut EvpModel,
) -> EvpStatus {
    guard(|| {
        non_null(out, "out")?;
        let dir = path(checkpoint_dir, "checkpoint_dir")?;
        let bank = if bank_dir.is_null() { None } else { Some(path(bank_dir, "bank_dir")?) };
        let model = load_checkpoint(&dir, bank.as_deref())?;
        *out = Box::into_raw(Box::new(EvpModel(model)));
        Ok(())
    })
}

/// Input geometry the model expects and its attribute count. Any output pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn evp_model_info(
    model: *const EvpModel,
    rgb_frames: *mut usize,
    event_frames: *mut usize,
    height: *mut usize,
    width: *mut usize,
    attributes: *mut usize,
) -> EvpStatus {
    guard(|| {
        non_null(model, "model")?;
        let c = (*model).0.config();
        for (p, v) in [
            (rgb_frames, c.rgb_frames),
            (event_frames, c.event_frames),
            (height, c.backbone.image_h),
            (width, c.backbone.image_w),
            (attributes, c.attributes.len()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Attribute logits for one sample. `rgb` holds `rgb_frames × 3 × H × W` values in [0, 1];
/// the events are voxelized with the model's event frame count.
///
/// # Safety
/// `model` and `events` must be live handles; `rgb` readable for `rgb_len` floats;
/// `logits` writable for `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn evp_model_infer(
    model: *const EvpModel,
    rgb: *const f32,
    rgb_len: usize,
    events: *const EvpEvents,
    logits: *mut f32,
    logits_len: usize,
) -> EvpStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(events, "events")?;
        let m = &(*model).0;
        let c = m.config();
        let (h, w) = (c.backbone.image_h, c.backbone.image_w);
        let expect = checked_mul(&[c.rgb_frames, 3, h, w])?;
        if rgb_len != expect {
            return Err(fail(
                EvpStatus::InvalidArgument,
                format!("rgb holds {rgb_len} values, model expects {expect}"),
            ));
        }
        need(logits_len, c.attributes.len())?;
        let input = SampleInput {
            rgb: Tensor::new(vec![c.rgb_frames, 3, h, w], slice(rgb, rgb_len, "rgb")?.to_vec())?,
            events: voxelize(&(*events).0, c.event_frames, h, w)?.data,
        };
        let l = m.forward(&input, &mut NoHook)?;
        slice_mut(logits, l.len(), "logits")?.copy_from_slice(l.data());
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn evp_model_free(model: *mut EvpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Ratio-weighted binary cross-entropy over a `batch × attributes` logit matrix, averaged
/// over all elements. `grad` may be null; otherwise it receives the gradient with respect
/// to the logits.
///
/// # Safety
/// `logits`, `labels`, and `grad` span `batch·attributes` doubles, `ratios` spans
/// `attributes`; `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn evp_weighted_bce(
    logits: *const f64,
    labels: *const f64,
    ratios: *const f64,
    batch: usize,
    attributes: usize,
    loss: *mut f64,
    grad: *mut f64,
) -> EvpStatus {
    guard(|| {
        non_null(loss, "loss")?;
        let n = checked_mul(&[batch, attributes])?;
        let p = Tensor::new(vec![batch, attributes], slice(logits, n, "logits")?.to_vec())?;
        let y = Tensor::new(vec![batch, attributes], slice(labels, n, "labels")?.to_vec())?;
        let r = Tensor::new(vec![attributes], slice(ratios, attributes, "ratios")?.to_vec())?;
        let (l, _) = weighted_bce(&p, &y, &r)?;
        if !grad.is_null() {
            let g = weighted_bce_grad(&p, &y, &r)?;
            slice_mut(grad, n, "grad")?.copy_from_slice(g.data());
        }
        *loss = l;
        Ok(())
    })
}

/// Metrics of logits thresholded at 0 against binary labels, both `batch × attributes`.
///
/// # Safety
/// `logits` and `labels` span `batch·attributes` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn evp_metrics(
    logits: *const f64,
    labels: *const f64,
    batch: usize,
    attributes: usize,
    out: *mut EvpMetrics,
) -> EvpStatus {
    guard(|| {
        non_null(out, "out")?;
        let n = checked_mul(&[batch, attributes])?;
        let p = Tensor::new(vec![batch, attributes], slice(logits, n, "logits")?.to_vec())?;
        let y = Tensor::new(vec![batch, attributes], slice(labels, n, "labels")?.to_vec())?;
        let m = compute_metrics(&p, &y, 0.0)?;
        *out = EvpMetrics {
            ma: m.ma,
            acc: m.acc,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        };
        Ok(())
    })
}
