//! C interface to the int8 training library.
//!
//! Networks live behind an opaque [`I8tNetwork`] handle. Every fallible
//! function returns an [`I8tStatus`]; on failure the message is available
//! from [`i8t_last_error`] on the same thread until the next failing call.
//! Pixel buffers are raw `u8` images in the dataset layout (`C x H x W` per
//! sample, channel-planar) and are quantized on the way in.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use int8_train::data::quantize_input;
use int8_train::network::init_weights;
use int8_train::{Checkpoint, Error, InitScheme, Network, NetworkSpec, RoundingConfig, RoundingScheme};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum I8tStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Network = 4,
    Config = 5,
    Format = 6,
    Version = 7,
    Io = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum I8tRounding {
    Nearest = 0,
    Stochastic = 1,
    PseudoStochastic = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum I8tInit {
    Uniform = 0,
    Normal = 1,
}

/// Opaque network handle.
pub struct I8tNetwork {
    net: Network,
    seed: u64,
    epoch: usize,
    rng: ChaCha8Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> I8tStatus {
    match err {
        Error::Shape { .. } => I8tStatus::Shape,
        Error::Network(_) => I8tStatus::Network,
        Error::Config(_) => I8tStatus::Config,
        Error::Format { .. } => I8tStatus::Format,
        Error::CheckpointVersion { .. } => I8tStatus::Version,
        Error::Usage(_) => I8tStatus::InvalidArgument,
        Error::Io(_) => I8tStatus::Io,
    }
}

struct Failure(I8tStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> I8tStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => I8tStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            I8tStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(I8tStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(I8tStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a>(net: *mut I8tNetwork) -> Result<&'a mut I8tNetwork, Failure> {
    net.as_mut().ok_or_else(|| null("network"))
}

fn scheme(r: I8tRounding) -> RoundingScheme {
    match r {
        I8tRounding::Nearest => RoundingScheme::Nearest,
        I8tRounding::Stochastic => RoundingScheme::Stochastic,
        I8tRounding::PseudoStochastic => RoundingScheme::PseudoStochastic,
    }
}

/// Quantizes `batch` images read from `pixels`.
unsafe fn read_batch(h: &I8tNetwork, pixels: *const u8, batch: usize) -> Result<int8_train::QTensor, Failure> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    if batch == 0 {
        return Err(Failure(I8tStatus::InvalidArgument, "batch must be positive".into()));
    }
    let [c, hh, w] = h.net.spec().input_shape;
    let len = batch
        .checked_mul(c * hh * w)
        .ok_or_else(|| Failure(I8tStatus::InvalidArgument, "batch too large".into()))?;
    let data = std::slice::from_raw_parts(pixels, len);
    Ok(quantize_input(data, vec![batch, c, hh, w]))
}

fn boxed(net: Network, seed: u64, epoch: usize, out: *mut *mut I8tNetwork) {
    let rng = ChaCha8Rng::seed_from_u64(seed ^ ((epoch as u64) << 32));
    let h = Box::new(I8tNetwork { net, seed, epoch, rng });
    // SAFETY: the caller checked `out` for null.
    unsafe { *out = Box::into_raw(h) };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn i8t_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn i8t_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates a preset network with freshly initialized weights. Training
/// batches may hold at most `max_batch` samples.
///
/// # Safety
/// `arch` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn i8t_network_create(
    arch: *const c_char,
    seed: u64,
    init: I8tInit,
    max_batch: usize,
    out: *mut *mut I8tNetwork,
) -> I8tStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut spec = NetworkSpec::preset(c_str(arch, "arch")?)?;
        let init = match init {
            I8tInit::Uniform => InitScheme::Uniform,
            I8tInit::Normal => InitScheme::Normal,
        };
        init_weights(&mut spec, init, &mut ChaCha8Rng::seed_from_u64(seed));
        let net = Network::new(spec, RoundingConfig::default(), max_batch)?;
        boxed(net, seed, 0, out);
        Ok(())
    })
}

/// Opens a checkpoint written by the trainer or by [`i8t_network_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn i8t_network_load(
    path: *const c_char,
    max_batch: usize,
    out: *mut *mut I8tNetwork,
) -> I8tStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(Path::new(c_str(path, "path")?))?;
        let net = Network::new(ck.to_spec()?, RoundingConfig::default(), max_batch)?;
        boxed(net, ck.seed, ck.epoch, out);
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn i8t_network_save(net: *mut I8tNetwork, path: *const c_char) -> I8tStatus {
    guard(|| {
        let h = handle(net)?;
        let path = c_str(path, "path")?;
        let stream = (h.epoch as u64 + 1) << 32;
        Checkpoint::capture(h.net.spec(), h.epoch, h.seed, stream).save(Path::new(path))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `net` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn i8t_network_free(net: *mut I8tNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Bytes per input image, or 0 for a null handle.
///
/// # Safety
/// `net` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn i8t_network_input_size(net: *const I8tNetwork) -> usize {
    net.as_ref().map_or(0, |h| h.net.spec().input_shape.iter().product())
}

/// # Safety
/// `net` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn i8t_network_num_classes(net: *const I8tNetwork) -> usize {
    net.as_ref().map_or(0, |h| h.net.spec().num_classes)
}

/// # Safety
/// `net` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn i8t_network_set_rounding(
    net: *mut I8tNetwork,
    activations: I8tRounding,
    gradients: I8tRounding,
    loss: I8tRounding,
) -> I8tStatus {
    guard(|| {
        let h = handle(net)?;
        h.net.set_rounding(RoundingConfig {
            activations: scheme(activations),
            gradients: scheme(gradients),
            loss: scheme(loss),
        });
        Ok(())
    })
}

/// One training step on `batch` images with class labels. Writes the number
/// of correctly classified samples (before the update) to `correct` if it
/// is non-null.
///
/// # Safety
/// `pixels` must hold `batch * input_size` bytes and `labels` `batch` bytes.
#[no_mangle]
pub unsafe extern "C" fn i8t_network_train_step(
    net: *mut I8tNetwork,
    pixels: *const u8,
    labels: *const u8,
    batch: usize,
    m_u: u32,
    correct: *mut usize,
) -> I8tStatus {
    guard(|| {
        let h = handle(net)?;
        let x = read_batch(h, pixels, batch)?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let labels: Vec<usize> = std::slice::from_raw_parts(labels, batch).iter().map(|&l| l as usize).collect();
        let step = h.net.train_step(&x, &labels, m_u, &mut h.rng)?;
        if !correct.is_null() {
            let pred = int8_train::network::argmax_rows(&step.logits);
            *correct = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        Ok(())
    })
}

/// Predicted class of each image, written to `out[0..batch]`.
///
/// # Safety
/// `pixels` must hold `batch * input_size` bytes and `out` `batch` bytes.
#[no_mangle]
pub unsafe extern "C" fn i8t_network_predict(
    net: *mut I8tNetwork,
    pixels: *const u8,
    batch: usize,
    out: *mut u8,
) -> I8tStatus {
    guard(|| {
        let h = handle(net)?;
        let x = read_batch(h, pixels, batch)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let pred = h.net.predict(&x)?;
        let out = std::slice::from_raw_parts_mut(out, batch);
        for (o, p) in out.iter_mut().zip(pred) {
            *o = p as u8;
        }
        Ok(())
    })
}

/// Evaluation-mode int8 logits, `batch * num_classes` values, and their
/// shared scale exponent.
///
/// # Safety
/// `pixels` must hold `batch * input_size` bytes, `out` room for
/// `batch * num_classes` values, and `scale` must be valid.
#[no_mangle]
pub unsafe extern "C" fn i8t_network_logits(
    net: *mut I8tNetwork,
    pixels: *const u8,
    batch: usize,
    out: *mut i8,
    scale: *mut i8,
) -> I8tStatus {
    guard(|| {
        let h = handle(net)?;
        let x = read_batch(h, pixels, batch)?;
        if out.is_null() || scale.is_null() {
            return Err(null("output"));
        }
        let logits = h.net.logits(&x)?;
        std::slice::from_raw_parts_mut(out, logits.len()).copy_from_slice(logits.data());
        *scale = logits.scale();
        Ok(())
    })
}
