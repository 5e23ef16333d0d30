//! C ABI for the pruning toolkit: opaque model/dataset handles, integer
//! status codes, and a thread-local last-error message. The header is
//! generated into `include/lapnet.h` at build time.
//!
//! Conventions: every function returns a [`LapStatus`]; out-parameters are
//! written only on `LAP_STATUS_OK`; handles are freed exactly once with
//! their `_free` function; strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use lapnet::{
    build, evaluate, load_model, prune, save_model, synthetic_blobs, train, Arch, Criterion,
    Dataset, LapError, MnistSplit, Mode, Network, PruneConfig, PruneContext, SparsitySchedule,
    Tensor, TrainConfig,
};

/// Result of every C-ABI call. Nonzero codes group like the CLI exit codes,
/// with extra codes for boundary misuse.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LapStatus {
    Ok = 0,
    /// Invalid arguments or configuration.
    Invalid = 1,
    /// Missing or malformed files and data.
    Data = 2,
    /// A verification oracle failed.
    Verify = 3,
    /// A required pointer was null.
    NullArg = 4,
    /// A string argument was not valid UTF-8.
    Utf8 = 5,
    /// An internal panic was caught at the boundary.
    Panic = 6,
}

/// Opaque network handle.
pub struct LapModel {
    net: Network,
}

/// Opaque dataset handle.
pub struct LapDataset {
    data: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("no error").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_else(|_| {
            CString::new("error message unavailable").unwrap()
        });
    });
}

fn status_of(e: &LapError) -> LapStatus {
    match e.exit_code() {
        3 => LapStatus::Verify,
        2 => LapStatus::Data,
        _ => LapStatus::Invalid,
    }
}

/// Run a fallible body, catching panics and recording failure messages.
fn guard<F>(f: F) -> LapStatus
where
    F: FnOnce() -> Result<(), LapError>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LapStatus::Ok,
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic at the C boundary");
            LapStatus::Panic
        }
    }
}

fn null_arg(name: &str) -> LapStatus {
    set_error(&format!("{name} must not be null"));
    LapStatus::NullArg
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn utf8<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, LapStatus> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{name} is not valid UTF-8"));
        LapStatus::Utf8
    })
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn lap_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Initialize a fresh network of the named architecture.
///
/// `arch_tag` is one of `linear-1000`, `fcn-paper`, `fcn-small`,
/// `conv6-small`; `input_shape` points at `rank` dimensions.
///
/// # Safety
/// `arch_tag` must be NUL-terminated, `input_shape` must point at `rank`
/// readable values, and `out` must be a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn lap_model_build(
    arch_tag: *const c_char,
    input_shape: *const usize,
    rank: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut LapModel,
) -> LapStatus {
    if out.is_null() {
        return null_arg("out");
    }
    if input_shape.is_null() {
        return null_arg("input_shape");
    }
    let tag = match utf8(arch_tag, "arch_tag") {
        Ok(t) => t,
        Err(status) => return status,
    };
    let shape = std::slice::from_raw_parts(input_shape, rank).to_vec();
    guard(|| {
        let arch = Arch::parse(tag)?;
        let net = build(arch, &shape, classes, seed)?;
        *out = Box::into_raw(Box::new(LapModel { net }));
        Ok(())
    })
}

/// Load a model (weights and masks) from a container file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn lap_model_load(path: *const c_char, out: *mut *mut LapModel) -> LapStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let path = match utf8(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    guard(|| {
        let net = load_model(path)?;
        *out = Box::into_raw(Box::new(LapModel { net }));
        Ok(())
    })
}

/// Save a model (weights and masks) to a container file.
///
/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lap_model_save(model: *const LapModel, path: *const c_char) -> LapStatus {
    let Some(model) = model.as_ref() else {
        return null_arg("model");
    };
    let path = match utf8(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    guard(|| save_model(&model.net, path))
}

/// Release a model handle. A null pointer is a no-op.
///
/// # Safety
/// `model` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn lap_model_free(model: *mut LapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fraction of prunable weights still alive in the model's masks.
///
/// # Safety
/// `model` must be a live handle and `out` a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn lap_model_surviving_fraction(
    model: *const LapModel,
    out: *mut f64,
) -> LapStatus {
    let Some(model) = model.as_ref() else {
        return null_arg("model");
    };
    if out.is_null() {
        return null_arg("out");
    }
    *out = model.net.surviving_fraction();
    LapStatus::Ok
}

/// Total number of prunable weights in the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn lap_model_weight_count(
    model: *const LapModel,
    out: *mut usize,
) -> LapStatus {
    let Some(model) = model.as_ref() else {
        return null_arg("model");
    };
    if out.is_null() {
        return null_arg("out");
    }
    *out = model.net.total_prunable_weights();
    LapStatus::Ok
}

/// Run one example through the network in inference mode. `input_len` must
/// equal the product of the model's input shape and `logits_len` its class
/// count.
///
/// # Safety
/// `input` must point at `input_len` readable values and `logits` at
/// `logits_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn lap_model_forward(
    model: *const LapModel,
    input: *const f64,
    input_len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> LapStatus {
    let Some(model) = model.as_ref() else {
        return null_arg("model");
    };
    if input.is_null() {
        return null_arg("input");
    }
    if logits.is_null() {
        return null_arg("logits");
    }
    let data = std::slice::from_raw_parts(input, input_len).to_vec();
    let sink = std::slice::from_raw_parts_mut(logits, logits_len);
    guard(|| {
        let shape = model.net.input_shape().to_vec();
        let x = Tensor::new(shape, data)?;
        let y = model.net.forward(&x, Mode::Eval)?;
        if y.len() != logits_len {
            return Err(LapError::Shape(format!(
                "logits buffer holds {logits_len} values, network emits {}",
                y.len()
            )));
        }
        sink.copy_from_slice(y.data());
        Ok(())
    })
}

/// Build a deterministic synthetic-blobs dataset.
///
/// # Safety
/// `out` must be a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn lap_dataset_blobs(
    classes: usize,
    dim: usize,
    count: usize,
    seed: u64,
    out: *mut *mut LapDataset,
) -> LapStatus {
    if out.is_null() {
        return null_arg("out");
    }
    guard(|| {
        let data = synthetic_blobs(classes, dim, count, seed)?;
        *out = Box::into_raw(Box::new(LapDataset { data }));
        Ok(())
    })
}

/// Load an MNIST split from the directory named by the data-dir env var
/// (or the built-in default). Nonzero `train_split` loads the train split.
///
/// # Safety
/// `out` must be a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn lap_dataset_mnist(train_split: i32, out: *mut *mut LapDataset) -> LapStatus {
    if out.is_null() {
        return null_arg("out");
    }
    guard(|| {
        let split = if train_split != 0 {
            MnistSplit::Train
        } else {
            MnistSplit::Test
        };
        let data = lapnet::load_mnist(split)?;
        *out = Box::into_raw(Box::new(LapDataset { data }));
        Ok(())
    })
}

/// Number of examples in the dataset.
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn lap_dataset_len(dataset: *const LapDataset, out: *mut usize) -> LapStatus {
    let Some(dataset) = dataset.as_ref() else {
        return null_arg("dataset");
    };
    if out.is_null() {
        return null_arg("out");
    }
    *out = dataset.data.len();
    LapStatus::Ok
}

/// Release a dataset handle. A null pointer is a no-op.
///
/// # Safety
/// `dataset` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn lap_dataset_free(dataset: *mut LapDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Train the model in place with Adam for `steps` minibatch steps,
/// respecting any masks already attached.
///
/// # Safety
/// `model` must be a live, exclusively held handle and `dataset` a live
/// handle.
#[no_mangle]
pub unsafe extern "C" fn lap_train(
    model: *mut LapModel,
    dataset: *const LapDataset,
    steps: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> LapStatus {
    let Some(model) = model.as_mut() else {
        return null_arg("model");
    };
    let Some(dataset) = dataset.as_ref() else {
        return null_arg("dataset");
    };
    guard(|| {
        let cfg = TrainConfig {
            steps,
            learning_rate,
            batch_size,
            seed,
            ..TrainConfig::default()
        };
        model.net = train(&model.net, &dataset.data, &cfg)?;
        Ok(())
    })
}

/// Classification error of the model on the dataset, in [0, 1].
///
/// # Safety
/// `model` and `dataset` must be live handles and `out` a valid
/// destination pointer.
#[no_mangle]
pub unsafe extern "C" fn lap_evaluate(
    model: *const LapModel,
    dataset: *const LapDataset,
    out: *mut f64,
) -> LapStatus {
    let Some(model) = model.as_ref() else {
        return null_arg("model");
    };
    let Some(dataset) = dataset.as_ref() else {
        return null_arg("dataset");
    };
    if out.is_null() {
        return null_arg("out");
    }
    guard(|| {
        *out = evaluate(&model.net, &dataset.data)?;
        Ok(())
    })
}

/// Prune the model in place: score with the named criterion, keep the
/// schedule's fraction per layer (conv `p^tau`, dense `q^tau`, final dense
/// `((1+q)/2)^tau`), and attach the masks. `dataset` may be null unless the
/// criterion needs data-driven statistics (`lap-act`, `obd`, `obd-lap`).
///
/// # Safety
/// `model` must be a live, exclusively held handle; `criterion_tag` must be
/// NUL-terminated; `dataset`, when non-null, must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lap_prune(
    model: *mut LapModel,
    criterion_tag: *const c_char,
    p: f64,
    q: f64,
    tau: u32,
    dataset: *const LapDataset,
) -> LapStatus {
    let Some(model) = model.as_mut() else {
        return null_arg("model");
    };
    let tag = match utf8(criterion_tag, "criterion_tag") {
        Ok(t) => t,
        Err(status) => return status,
    };
    let data = dataset.as_ref().map(|d| &d.data);
    guard(|| {
        let criterion = Criterion::parse(tag)?;
        let config = PruneConfig::new(criterion, SparsitySchedule::new(p, q, tau)?);
        let ctx = PruneContext {
            data,
            ..PruneContext::none()
        };
        let (pruned, _masks) = prune(&model.net, &config, &ctx)?;
        model.net = pruned;
        Ok(())
    })
}
