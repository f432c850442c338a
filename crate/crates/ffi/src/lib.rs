//! C interface to `newton-cnn`.
//!
//! Every function returns an [`NcnnStatus`]; on failure a description is
//! kept per thread and read with [`ncnn_last_error`]. Handles are opaque and
//! released with their `_free` function. Images are passed in network
//! layout: instance after instance, each column-major with channels
//! innermost, so pixel `(p, q, j)` of an `a×b×d` image sits at
//! `(p + q·a)·d + j`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use newton_cnn::backward::value_and_gradient;
use newton_cnn::config::{init_params, ModelConfig};
use newton_cnn::forward::{objective, BatchPlan, ForwardCache, Network};
use newton_cnn::gauss_newton::{GNContext, JacobianCache};
use newton_cnn::{Dataset, Error};

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NcnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Dimension = 5,
    Data = 6,
    Numerical = 7,
    Io = 8,
    Panic = 9,
}

/// A network architecture with its index maps.
pub struct NcnnModel {
    net: Network,
}

/// The Gauss-Newton operator at a fixed point and subset.
pub struct NcnnGaussNewton {
    net: Network,
    cache: ForwardCache,
    jacobian: Option<JacobianCache>,
    c: f64,
    lambda: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(e: &Error) -> NcnnStatus {
    match e {
        Error::Config { .. } => NcnnStatus::Config,
        Error::Shape { .. } => NcnnStatus::Shape,
        Error::Dimension(_) | Error::IndexOutOfRange { .. } => NcnnStatus::Dimension,
        Error::InvalidArgument(_) => NcnnStatus::InvalidArgument,
        Error::Data(_) => NcnnStatus::Data,
        Error::Io(_) => NcnnStatus::Io,
        _ if e.is_numerical() => NcnnStatus::Numerical,
        _ => NcnnStatus::InvalidArgument,
    }
}

struct Failure(NcnnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(NcnnStatus::NullPointer, format!("{what} is NULL"))
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> NcnnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            NcnnStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            NcnnStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` is NULL or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` is NULL or valid for `len` writes.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// # Safety
/// `ptr` is NULL or points to a live handle.
unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got == want {
        Ok(())
    } else {
        Err(Failure(
            NcnnStatus::Dimension,
            format!("{what} has length {got}, expected {want}"),
        ))
    }
}

/// # Safety
/// Pointers are valid for their lengths.
unsafe fn dataset(
    net: &Network,
    images: *const f64,
    labels: *const u32,
    instances: usize,
) -> Result<Dataset, Failure> {
    let images = slice(images, instances * net.input_len(), "images")?;
    let labels = slice(labels, instances, "labels")?;
    let config = &net.config;
    Ok(Dataset::new(
        config.input,
        net.num_classes(),
        images.to_vec(),
        labels.iter().map(|&y| y as usize).collect(),
    )?)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ncnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Build a model from an architecture description.
///
/// # Safety
/// `config` is a NUL-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ncnn_model_new(config: *const c_char, out: *mut *mut NcnnModel) -> NcnnStatus {
    guard(|| {
        if config.is_null() {
            return Err(null("config"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(config)
            .to_str()
            .map_err(|_| Failure(NcnnStatus::Config, "config is not UTF-8".into()))?;
        let net = Network::new(ModelConfig::parse(text)?)?;
        *out = Box::into_raw(Box::new(NcnnModel { net }));
        Ok(())
    })
}

/// # Safety
/// `model` is NULL or came from [`ncnn_model_new`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ncnn_model_free(model: *mut NcnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of parameters `n`.
///
/// # Safety
/// `model` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ncnn_param_count(model: *const NcnnModel, out: *mut usize) -> NcnnStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.net.num_params();
        Ok(())
    })
}

/// Number of classes `K`.
///
/// # Safety
/// `model` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ncnn_num_classes(model: *const NcnnModel, out: *mut usize) -> NcnnStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.net.num_classes();
        Ok(())
    })
}

/// Write seeded initial parameters into `theta[0..n]`.
///
/// # Safety
/// `model` is a live handle and `theta` is valid for `n` writes.
#[no_mangle]
pub unsafe extern "C" fn ncnn_init_params(model: *const NcnnModel, seed: u64, theta: *mut f64, n: usize) -> NcnnStatus {
    guard(|| {
        let m = handle(model, "model")?;
        expect_len(n, m.net.num_params(), "theta")?;
        let out = slice_mut(theta, n, "theta")?;
        out.copy_from_slice(init_params(&m.net.config, seed)?.as_slice());
        Ok(())
    })
}

/// `f(θ) = θᵀθ/(2C) + (1/l)·Σ‖z − y‖²` over `instances` images.
///
/// # Safety
/// `theta` holds `n` reals, `images` holds `instances` images, `labels`
/// holds `instances` labels and `f` is writable.
#[no_mangle]
pub unsafe extern "C" fn ncnn_objective(
    model: *const NcnnModel,
    theta: *const f64,
    n: usize,
    images: *const f64,
    labels: *const u32,
    instances: usize,
    c: f64,
    f: *mut f64,
) -> NcnnStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let theta = slice(theta, n, "theta")?;
        let data = dataset(&m.net, images, labels, instances)?;
        let plan = BatchPlan::uniform(instances, 1)?;
        let e = objective(&m.net, theta, &data, c, &plan, false)?;
        *f.as_mut().ok_or_else(|| null("f"))? = e.f;
        Ok(())
    })
}

/// `f(θ)` and `∇f(θ)`; `f` may be NULL.
///
/// # Safety
/// As [`ncnn_objective`], plus `grad` is valid for `n` writes.
#[no_mangle]
pub unsafe extern "C" fn ncnn_gradient(
    model: *const NcnnModel,
    theta: *const f64,
    n: usize,
    images: *const f64,
    labels: *const u32,
    instances: usize,
    c: f64,
    f: *mut f64,
    grad: *mut f64,
) -> NcnnStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let theta = slice(theta, n, "theta")?;
        let data = dataset(&m.net, images, labels, instances)?;
        let grad = slice_mut(grad, n, "grad")?;
        let plan = BatchPlan::uniform(instances, 1)?;
        let ge = value_and_gradient(&m.net, theta, &data, c, &plan)?;
        expect_len(grad.len(), ge.grad.len(), "grad")?;
        grad.copy_from_slice(&ge.grad);
        if let Some(f) = f.as_mut() {
            *f = ge.f;
        }
        Ok(())
    })
}

/// Set up `v ↦ (1/C + λ)v + (1/|S|)·Jᵀ(2Jv)` at `θ` with every given image
/// as the subset.
///
/// # Safety
/// `theta` holds `n` reals, `images` holds `instances` images and `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ncnn_gn_new(
    model: *const NcnnModel,
    theta: *const f64,
    n: usize,
    images: *const f64,
    instances: usize,
    c: f64,
    lambda: f64,
    out: *mut *mut NcnnGaussNewton,
) -> NcnnStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let theta = slice(theta, n, "theta")?;
        let images = slice(images, instances * m.net.input_len(), "images")?;
        let cache = m.net.forward(theta, images)?;
        // Validates C, λ and the subset before the Jacobian is kept.
        let ctx = GNContext::new(&m.net, theta, &cache, c, lambda)?;
        let jacobian = ctx.jacobian;
        *out = Box::into_raw(Box::new(NcnnGaussNewton {
            net: m.net.clone(),
            cache,
            jacobian: Some(jacobian),
            c,
            lambda,
        }));
        Ok(())
    })
}

/// `out = G v`, both of length `n`.
///
/// # Safety
/// `gn` is a live handle, `v` and `out` are valid for `n` reals and do not
/// overlap.
#[no_mangle]
pub unsafe extern "C" fn ncnn_gn_matvec(gn: *mut NcnnGaussNewton, v: *const f64, out: *mut f64, n: usize) -> NcnnStatus {
    guard(|| {
        let g = gn.as_mut().ok_or_else(|| null("gn"))?;
        expect_len(n, g.net.num_params(), "v")?;
        let v = slice(v, n, "v")?;
        let out = slice_mut(out, n, "out")?;
        let jacobian = g
            .jacobian
            .take()
            .ok_or_else(|| Failure(NcnnStatus::Panic, "operator was left incomplete by an earlier panic".into()))?;
        let ctx = GNContext {
            net: &g.net,
            cache: &g.cache,
            jacobian,
            c: g.c,
            lambda: g.lambda,
        };
        let r = ctx.gn_matvec(v);
        g.jacobian = Some(ctx.jacobian);
        out.copy_from_slice(&r?);
        Ok(())
    })
}

/// Replace the damping λ; the Jacobian does not depend on it.
///
/// # Safety
/// `gn` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn ncnn_gn_set_lambda(gn: *mut NcnnGaussNewton, lambda: f64) -> NcnnStatus {
    guard(|| {
        let g = gn.as_mut().ok_or_else(|| null("gn"))?;
        if !(lambda >= 0.0) {
            return Err(Failure(NcnnStatus::InvalidArgument, format!("λ must be ≥ 0, got {lambda}")));
        }
        g.lambda = lambda;
        Ok(())
    })
}

/// # Safety
/// `gn` is NULL or came from [`ncnn_gn_new`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ncnn_gn_free(gn: *mut NcnnGaussNewton) {
    if !gn.is_null() {
        drop(Box::from_raw(gn));
    }
}
