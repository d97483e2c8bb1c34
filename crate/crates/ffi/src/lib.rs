//! C ABI over `gemtrans-core`: load a checkpoint, run predictions and read
//! back attention for one sample at a time.
//!
//! Every fallible function returns a [`GemtStatus`]. On failure the message
//! is available from [`gemt_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use gemtrans_core::harness::commands::{load_model, CONFIG_FILE};
use gemtrans_core::harness::RunConfig;
use gemtrans_core::model::{infer, AttentionRecord, GemTransModel, Task, VideoSample};
use gemtrans_core::GemtError;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GemtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    /// Output buffer too small; the message names the required length.
    BufferTooSmall = 3,
    Config = 4,
    Io = 5,
    Checkpoint = 6,
    Shape = 7,
    Numeric = 8,
    Internal = 9,
}

/// Task selector mirrored from the run config.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GemtTask {
    Ef = 0,
    As = 1,
}

/// Input geometry and output sizes of a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GemtDims {
    pub k: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Patches per frame, the length of one spatial attention vector.
    pub patches: usize,
    /// 1 for EF, 4 for AS.
    pub outputs: usize,
}

/// Opaque model handle.
pub struct GemtModel {
    model: GemTransModel<f32>,
    task: Task,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &GemtError) -> GemtStatus {
    match e {
        GemtError::Config(_) => GemtStatus::Config,
        GemtError::Io(_) | GemtError::Json(_) => GemtStatus::Io,
        GemtError::Checkpoint(_) | GemtError::UnknownParameter(_) => GemtStatus::Checkpoint,
        GemtError::Shape { .. } | GemtError::Capacity { .. } => GemtStatus::Shape,
        GemtError::InvalidArgument { .. } | GemtError::Generation(_) => GemtStatus::InvalidArgument,
        e if e.is_numeric() => GemtStatus::Numeric,
        _ => GemtStatus::Internal,
    }
}

struct Failure(GemtStatus, String);

impl From<GemtError> for Failure {
    fn from(e: GemtError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: GemtStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GemtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GemtStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GemtStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(GemtStatus::NullArgument, format!("{name} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GemtStatus::InvalidArgument, format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const GemtModel) -> Result<&'a GemtModel, Failure> {
    m.as_ref()
        .ok_or_else(|| fail(GemtStatus::NullArgument, "model is null"))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(fail(GemtStatus::NullArgument, format!("{name} is null")));
    }
    if len < need {
        return Err(fail(
            GemtStatus::BufferTooSmall,
            format!("{name} needs {need} values, got {len}"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

fn dims_of(m: &GemtModel) -> GemtDims {
    let c = &m.model.config;
    GemtDims {
        k: c.k,
        t: c.t,
        h: c.h,
        w: c.w,
        patches: c.patches_per_frame(),
        outputs: match m.task {
            Task::Ef => 1,
            Task::As => 4,
        },
    }
}

/// Wraps caller pixels as a sample and runs the model.
unsafe fn run(m: &GemtModel, videos: *const f32, len: usize) -> Result<(Vec<f64>, AttentionRecord), Failure> {
    if videos.is_null() {
        return Err(fail(GemtStatus::NullArgument, "videos is null"));
    }
    let d = dims_of(m);
    let need = d.k * d.t * d.h * d.w;
    if len != need {
        return Err(fail(
            GemtStatus::Shape,
            format!("videos holds {len} values, the model expects K·T·H·W = {need}"),
        ));
    }
    let sample = VideoSample {
        sample_id: "ffi".into(),
        k: d.k,
        t: d.t,
        h: d.h,
        w: d.w,
        videos: std::slice::from_raw_parts(videos, len).to_vec(),
        ef_label: None,
        as_label: None,
        supervision: None,
    };
    sample.validate()?;
    let mut inf = infer(&m.model, &[&sample], m.task, 1)?;
    Ok((inf.predictions.remove(0), inf.attention.remove(0)))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gemt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn gemt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint. `config_path` may be NULL, in which case `config.txt`
/// next to the checkpoint is read. On success `*out` owns a new handle that
/// must be released with `gemt_model_free`.
///
/// # Safety
/// Paths must be NUL-terminated strings or NULL; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gemt_model_load(
    checkpoint_path: *const c_char,
    config_path: *const c_char,
    out: *mut *mut GemtModel,
) -> GemtStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(GemtStatus::NullArgument, "out is null"));
        }
        *out = ptr::null_mut();
        let ck = path_arg(checkpoint_path, "checkpoint_path")?;
        let cfg_path = if config_path.is_null() {
            ck.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE)
        } else {
            path_arg(config_path, "config_path")?
        };
        let cfg = RunConfig::load(&cfg_path)?;
        cfg.validate()?;
        let model = load_model(&ck, &cfg.model)?;
        *out = Box::into_raw(Box::new(GemtModel { model, task: cfg.task }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from `gemt_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gemt_model_free(model: *mut GemtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the model's input geometry and output size.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gemt_model_dims(model: *const GemtModel, out: *mut GemtDims) -> GemtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out
            .as_mut()
            .ok_or_else(|| fail(GemtStatus::NullArgument, "out is null"))?;
        *out = dims_of(m);
        Ok(())
    })
}

/// Task the model was trained for.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gemt_model_task(model: *const GemtModel, out: *mut GemtTask) -> GemtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out
            .as_mut()
            .ok_or_else(|| fail(GemtStatus::NullArgument, "out is null"))?;
        *out = match m.task {
            Task::Ef => GemtTask::Ef,
            Task::As => GemtTask::As,
        };
        Ok(())
    })
}

/// Predicts one sample. `videos` holds K·T·H·W intensities in [0,1],
/// row-major over (k, t, y, x). EF writes one value, AS four probabilities.
///
/// # Safety
/// `videos` must point to `videos_len` floats and `out` to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gemt_predict(
    model: *const GemtModel,
    videos: *const f32,
    videos_len: usize,
    out: *mut f64,
    out_len: usize,
) -> GemtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let need = dims_of(m).outputs;
        let dst = out_slice(out, out_len, need, "out")?;
        let (pred, _) = run(m, videos, videos_len)?;
        dst.copy_from_slice(&pred);
        Ok(())
    })
}

/// Attention of one sample: `spatial` receives K·T·patches values ordered by
/// (k, t, patch), `temporal` K·T values ordered by (k, t), `video` K values.
///
/// # Safety
/// Buffers must hold at least the given number of doubles.
#[no_mangle]
pub unsafe extern "C" fn gemt_attention(
    model: *const GemtModel,
    videos: *const f32,
    videos_len: usize,
    spatial: *mut f64,
    spatial_len: usize,
    temporal: *mut f64,
    temporal_len: usize,
    video: *mut f64,
    video_len: usize,
) -> GemtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = dims_of(m);
        let sp = out_slice(spatial, spatial_len, d.k * d.t * d.patches, "spatial")?;
        let tp = out_slice(temporal, temporal_len, d.k * d.t, "temporal")?;
        let vd = out_slice(video, video_len, d.k, "video")?;
        let (_, rec) = run(m, videos, videos_len)?;
        let flat: Vec<f64> = rec.spatial.iter().flatten().flatten().copied().collect();
        sp.copy_from_slice(&flat);
        let flat: Vec<f64> = rec.temporal.iter().flatten().copied().collect();
        tp.copy_from_slice(&flat);
        vd.copy_from_slice(&rec.video);
        Ok(())
    })
}
