//! C ABI for `ignet`: model handles, checkpoint I/O, eval-mode forward and
//! the inversion functions.
//!
//! Every fallible call returns an [`IgnetStatus`]; on failure the message is
//! available from [`ignet_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ignet::attention::{invert, AttentionMode, InversionKind};
use ignet::checkpoint::Checkpoint;
use ignet::data::NormSpec;
use ignet::model::{Model, ModelConfig};
use ignet::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IgnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Data = 5,
    NonFinite = 6,
    Checkpoint = 7,
    Io = 8,
    Internal = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IgnetInversion {
    /// `1 - alpha * m` on masks in `[0, 1]`.
    T1 = 1,
    /// `sigmoid(1 / m)` on masks in `[0, 1]`.
    T2 = 2,
    /// `sigmoid(-z)` on pre-sigmoid logits.
    T3 = 3,
}

/// Opaque model handle.
pub struct IgnetModel {
    model: Model,
    norm: NormSpec,
    epoch: u64,
    seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IgnetStatus {
    match e {
        Error::Shape(_) => IgnetStatus::Shape,
        Error::InvalidArgument(_) | Error::DivisionByZero { .. } => IgnetStatus::InvalidArgument,
        Error::NonFinite(_) => IgnetStatus::NonFinite,
        Error::Config(_) => IgnetStatus::Config,
        Error::Data(_) => IgnetStatus::Data,
        Error::Checkpoint(_) => IgnetStatus::Checkpoint,
        Error::Io(_) => IgnetStatus::Io,
        Error::Autograd(_) => IgnetStatus::Internal,
    }
}

struct Fail(IgnetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(IgnetStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IgnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            IgnetStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            IgnetStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(IgnetStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(p: *const IgnetModel) -> Result<&'a IgnetModel, Fail> {
    p.as_ref().ok_or_else(|| null("model"))
}

unsafe fn model_mut<'a>(p: *mut IgnetModel) -> Result<&'a mut IgnetModel, Fail> {
    p.as_mut().ok_or_else(|| null("model"))
}

fn publish(out: *mut *mut IgnetModel, m: IgnetModel) -> Result<(), Fail> {
    unsafe { *out = Box::into_raw(Box::new(m)) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ignet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn ignet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds the three-stage mini residual network for `3 x side x side`
/// inputs. `attention` uses the CLI grammar, e.g. `"cbam-ign1:alpha=0.5"`.
///
/// # Safety
/// `attention` must be a valid C string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ignet_model_new(
    attention: *const c_char,
    num_classes: usize,
    side: usize,
    seed: u64,
    out: *mut *mut IgnetModel,
) -> IgnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mode: AttentionMode = str_arg(attention, "attention")?.parse()?;
        let cfg = ModelConfig { input_shape: [3, side, side], ..ModelConfig::mini_resnet(mode, num_classes) };
        let model = Model::build(cfg, seed)?;
        publish(out, IgnetModel { model, norm: NormSpec::identity(3), epoch: 0, seed })
    })
}

/// Loads a checkpoint written by `ignet train` or [`ignet_model_save`].
///
/// # Safety
/// `path` must be a valid C string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ignet_model_load(path: *const c_char, out: *mut *mut IgnetModel) -> IgnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(&PathBuf::from(str_arg(path, "path")?))?;
        let model = ck.to_model()?;
        publish(out, IgnetModel { model, norm: ck.norm, epoch: ck.epoch, seed: ck.seed })
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ignet_model_save(model: *mut IgnetModel, path: *const c_char) -> IgnetStatus {
    guard(|| {
        let h = model_mut(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        Checkpoint::from_model(&mut h.model, h.norm.clone(), h.epoch, h.seed, None).save(&path)?;
        Ok(())
    })
}

/// Eval-mode logits for `n` images of raw `[0, 1]` pixels in NCHW order.
/// The checkpoint's normalization is applied first (identity for new
/// models). `input_len` must be `n * 3 * side * side` and `output_len`
/// `n * num_classes`.
///
/// # Safety
/// `input` and `output` must point to `input_len` and `output_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ignet_model_forward(
    model: *mut IgnetModel,
    input: *const f64,
    n: usize,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> IgnetStatus {
    guard(|| {
        let h = model_mut(model)?;
        if input.is_null() || output.is_null() {
            return Err(null("input or output"));
        }
        let [c, hh, ww] = h.model.config().input_shape;
        let k = h.model.config().num_classes;
        if n == 0 || input_len != n * c * hh * ww || output_len != n * k {
            return Err(Fail(
                IgnetStatus::Shape,
                format!(
                    "expected input {} and output {} values for n = {n}, got {input_len} and {output_len}",
                    n * c * hh * ww,
                    n * k
                ),
            ));
        }
        let x = Tensor::from_vec(&[n, c, hh, ww], std::slice::from_raw_parts(input, input_len).to_vec())?;
        let x = h.norm.apply(&x)?;
        let logits = h.model.predict(&x, 64)?;
        std::slice::from_raw_parts_mut(output, output_len).copy_from_slice(logits.data());
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ignet_model_num_classes(model: *const IgnetModel, out: *mut usize) -> IgnetStatus {
    guard(|| {
        let h = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = h.model.config().num_classes;
        Ok(())
    })
}

/// Writes `(C, H, W)` of one input image to `out[0..3]`.
///
/// # Safety
/// `model` must come from this library and `out` point to three `size_t`.
#[no_mangle]
pub unsafe extern "C" fn ignet_model_input_shape(model: *const IgnetModel, out: *mut usize) -> IgnetStatus {
    guard(|| {
        let h = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, 3).copy_from_slice(&h.model.config().input_shape);
        Ok(())
    })
}

/// Number of trainable scalars.
///
/// # Safety
/// `model` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ignet_model_param_count(model: *const IgnetModel, out: *mut usize) -> IgnetStatus {
    guard(|| {
        let h = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = h.model.param_count();
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ignet_model_free(model: *mut IgnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Applies an inversion elementwise. T1 and T2 read masks in `[0, 1]`; T3
/// reads logits. `alpha` is used by T1 only and must lie in `[0, 1]`.
///
/// # Safety
/// `values` and `out` must point to `len` doubles; they may alias.
#[no_mangle]
pub unsafe extern "C" fn ignet_invert(
    kind: IgnetInversion,
    alpha: f64,
    values: *const f64,
    len: usize,
    out: *mut f64,
) -> IgnetStatus {
    guard(|| {
        if len > 0 && (values.is_null() || out.is_null()) {
            return Err(null("values or out"));
        }
        if len == 0 {
            return Ok(());
        }
        let k = match kind {
            IgnetInversion::T1 => InversionKind::t1(alpha)?,
            IgnetInversion::T2 => InversionKind::T2,
            IgnetInversion::T3 => InversionKind::T3,
        };
        let t = Tensor::from_vec(&[len], std::slice::from_raw_parts(values, len).to_vec())?;
        let r = if k.uses_logits() { invert(k, &t, Some(&t))? } else { invert(k, &t, None)? };
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(r.data());
        Ok(())
    })
}
