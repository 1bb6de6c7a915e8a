//! C ABI over the varc library.
//!
//! Objects cross the boundary as opaque handles created by `varc_*_load` /
//! `varc_*_from_json` / `varc_predict` and released with the matching
//! `varc_*_free`. Every fallible call returns a [`VarcStatus`]; the message
//! for the most recent failure on the calling thread is available from
//! [`varc_last_error_message`]. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use varc::checkpoint::Checkpoint;
use varc::config::RunConfig;
use varc::data::{Grid, Task};
use varc::infer::{multi_view_infer, VoteEntry};
use varc::train::test_time_train;
use varc::vit::VitModel;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Model = 5,
    Runtime = 6,
    OutOfRange = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A trained model plus the run configuration stored with it.
pub struct VarcModel {
    model: VitModel,
    run: RunConfig,
}

pub struct VarcTask {
    task: Task,
}

/// Ranked candidates for each inference input of a task.
pub struct VarcPrediction {
    task_id: String,
    inputs: Vec<Vec<VoteEntry>>,
}

/// Knobs for [`varc_predict`]. Fill with [`varc_predict_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarcPredictOptions {
    pub ttt_epochs: u32,
    pub ttt_warmup_epochs: u32,
    pub ttt_batch_size: u32,
    pub ttt_lr: f64,
    pub num_aux: u32,
    pub views_per_aux: u32,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("no interior nul")));
}

fn fail(status: VarcStatus, msg: impl Into<String>) -> VarcStatus {
    set_error(msg);
    status
}

/// Runs `f`, clearing the thread's error first and turning a panic into
/// `VARC_STATUS_PANIC`.
fn guard(f: impl FnOnce() -> VarcStatus) -> VarcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(VarcStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, VarcStatus> {
    if p.is_null() {
        return Err(fail(VarcStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(VarcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn into_handle<T>(value: T, out: *mut *mut T) -> VarcStatus {
    unsafe { *out = Box::into_raw(Box::new(value)) };
    VarcStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn varc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next `varc_*` call on the same thread.
#[no_mangle]
pub extern "C" fn varc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn varc_model_load(path: *const c_char, out: *mut *mut VarcModel) -> VarcStatus {
    guard(|| {
        if out.is_null() {
            return fail(VarcStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match c_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ck = match Checkpoint::load(Path::new(path)) {
            Ok(c) => c,
            Err(varc::checkpoint::CheckpointError::Io(e)) => return fail(VarcStatus::Io, format!("{path}: {e}")),
            Err(e) => return fail(VarcStatus::Data, format!("{path}: {e}")),
        };
        let model = match ck.model() {
            Ok(m) => m,
            Err(e) => return fail(VarcStatus::Model, e.to_string()),
        };
        let run = if ck.meta.run.is_null() {
            RunConfig::default()
        } else {
            match serde_json::from_value(ck.meta.run.clone()) {
                Ok(r) => r,
                Err(e) => return fail(VarcStatus::Data, format!("stored run config: {e}")),
            }
        };
        into_handle(VarcModel { model, run }, out)
    })
}

/// # Safety
/// `model` must be null or a handle from [`varc_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn varc_model_free(model: *mut VarcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn varc_model_num_params(model: *const VarcModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.num_params())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn varc_model_canvas_size(model: *const VarcModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().canvas_size)
}

/// Parses one task in ARC JSON format (`{"train": [...], "test": [...]}`).
///
/// # Safety
/// `json` and `task_id` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn varc_task_from_json(json: *const c_char, task_id: *const c_char, out: *mut *mut VarcTask) -> VarcStatus {
    guard(|| {
        if out.is_null() {
            return fail(VarcStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let (json, id) = match (c_str(json, "json"), c_str(task_id, "task_id")) {
            (Ok(j), Ok(i)) => (j, i),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let value: serde_json::Value = match serde_json::from_str(json) {
            Ok(v) => v,
            Err(e) => return fail(VarcStatus::Data, format!("invalid JSON: {e}")),
        };
        match Task::from_json(id, &value) {
            Ok(task) => into_handle(VarcTask { task }, out),
            Err(e) => fail(VarcStatus::Data, e.to_string()),
        }
    })
}

/// Loads a task file; the task id is the file stem.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn varc_task_load(path: *const c_char, out: *mut *mut VarcTask) -> VarcStatus {
    guard(|| {
        if out.is_null() {
            return fail(VarcStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match c_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Task::load(Path::new(path)) {
            Ok(task) => into_handle(VarcTask { task }, out),
            Err(varc::data::DataError::Io(e)) => fail(VarcStatus::Io, format!("{path}: {e}")),
            Err(e) => fail(VarcStatus::Data, e.to_string()),
        }
    })
}

/// # Safety
/// `task` must be null or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn varc_task_free(task: *mut VarcTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// # Safety
/// `task` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn varc_task_num_inputs(task: *const VarcTask) -> usize {
    task.as_ref().map_or(0, |t| t.task.infer.len())
}

/// Fills `out` with the settings stored in `model`'s checkpoint.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn varc_predict_options_default(model: *const VarcModel, out: *mut VarcPredictOptions) -> VarcStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            return fail(VarcStatus::NullPointer, "model or out is null");
        };
        let r = &m.run;
        *out = VarcPredictOptions {
            ttt_epochs: r.ttt_epochs as u32,
            ttt_warmup_epochs: r.ttt_warmup_epochs as u32,
            ttt_batch_size: r.ttt_batch_size as u32,
            ttt_lr: r.ttt_base_lr,
            num_aux: r.num_aux as u32,
            views_per_aux: r.views_per_aux as u32,
            seed: r.seed,
        };
        VarcStatus::Ok
    })
}

/// Test-time trains a copy of `model` on `task`'s demonstrations, then votes
/// over multiple views for every inference input. `options` may be null to
/// use [`varc_predict_options_default`].
///
/// # Safety
/// `model` and `task` must be live handles; `options` null or valid; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn varc_predict(
    model: *const VarcModel,
    task: *const VarcTask,
    options: *const VarcPredictOptions,
    out: *mut *mut VarcPrediction,
) -> VarcStatus {
    guard(|| {
        if out.is_null() {
            return fail(VarcStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let (Some(m), Some(t)) = (model.as_ref(), task.as_ref()) else {
            return fail(VarcStatus::NullPointer, "model or task is null");
        };
        let mut run = m.run.clone();
        if let Some(o) = options.as_ref() {
            run.ttt_epochs = o.ttt_epochs as usize;
            run.ttt_warmup_epochs = o.ttt_warmup_epochs as usize;
            run.ttt_batch_size = o.ttt_batch_size as usize;
            run.ttt_base_lr = o.ttt_lr;
            run.num_aux = o.num_aux as usize;
            run.views_per_aux = o.views_per_aux as usize;
            run.seed = o.seed;
        }
        if let Err(e) = run.validate() {
            return fail(VarcStatus::InvalidArgument, e.to_string());
        }
        let adapted = match test_time_train(&m.model, &t.task, &run.ttt_config(), &mut |_, _| {}) {
            Ok(a) => a,
            Err(e) => return fail(VarcStatus::Runtime, e.to_string()),
        };
        let infer = run.infer_config();
        let inputs = t
            .task
            .infer
            .iter()
            .map(|p| multi_view_infer(&adapted, &t.task.demo, &p.input, &infer).map(|v| v.ranked).unwrap_or_default())
            .collect();
        into_handle(VarcPrediction { task_id: t.task.task_id.clone(), inputs }, out)
    })
}

/// # Safety
/// `pred` must be null or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn varc_prediction_free(pred: *mut VarcPrediction) {
    if !pred.is_null() {
        drop(Box::from_raw(pred));
    }
}

/// # Safety
/// `pred` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn varc_prediction_num_inputs(pred: *const VarcPrediction) -> usize {
    pred.as_ref().map_or(0, |p| p.inputs.len())
}

/// Distinct voted grids for input `input`, or 0 when out of range.
///
/// # Safety
/// `pred` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn varc_prediction_num_candidates(pred: *const VarcPrediction, input: usize) -> usize {
    pred.as_ref().and_then(|p| p.inputs.get(input)).map_or(0, Vec::len)
}

/// Copies candidate `rank` (0 = most votes) of input `input` into `cells`
/// row-major and writes its shape and vote count. Call with `cells` null to
/// query the shape; `VARC_STATUS_BUFFER_TOO_SMALL` is returned when
/// `cells_len < rows * cols`.
///
/// # Safety
/// `pred` must be a live handle; `rows`, `cols`, `votes` writable or null;
/// `cells` null or valid for `cells_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn varc_prediction_candidate(
    pred: *const VarcPrediction,
    input: usize,
    rank: usize,
    rows: *mut usize,
    cols: *mut usize,
    votes: *mut usize,
    cells: *mut u8,
    cells_len: usize,
) -> VarcStatus {
    guard(|| {
        let Some(p) = pred.as_ref() else {
            return fail(VarcStatus::NullPointer, "prediction is null");
        };
        let Some(entry) = p.inputs.get(input).and_then(|c| c.get(rank)) else {
            return fail(VarcStatus::OutOfRange, format!("no candidate {rank} for input {input}"));
        };
        let g: &Grid = &entry.grid;
        if let Some(r) = rows.as_mut() {
            *r = g.rows();
        }
        if let Some(c) = cols.as_mut() {
            *c = g.cols();
        }
        if let Some(v) = votes.as_mut() {
            *v = entry.count;
        }
        if cells.is_null() {
            return VarcStatus::Ok;
        }
        if cells_len < g.cells().len() {
            return fail(VarcStatus::BufferTooSmall, format!("need {} cells, got {cells_len}", g.cells().len()));
        }
        ptr::copy_nonoverlapping(g.cells().as_ptr(), cells, g.cells().len());
        VarcStatus::Ok
    })
}

/// The top two candidates per input in ARC submission JSON. Release with
/// [`varc_string_free`]. Null on failure.
///
/// # Safety
/// `pred` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn varc_prediction_to_json(pred: *const VarcPrediction) -> *mut c_char {
    let Some(p) = pred.as_ref() else {
        set_error("prediction is null");
        return ptr::null_mut();
    };
    let fallback = serde_json::json!([[0]]);
    let answers: Vec<serde_json::Value> = p
        .inputs
        .iter()
        .map(|c| {
            let at = |i: usize| c.get(i).map(|e| e.grid.to_json()).unwrap_or_else(|| fallback.clone());
            serde_json::json!({ "attempt_1": at(0), "attempt_2": at(1) })
        })
        .collect();
    let text = serde_json::json!({ p.task_id.clone(): answers }).to_string();
    CString::new(text).map_or(ptr::null_mut(), CString::into_raw)
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn varc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
