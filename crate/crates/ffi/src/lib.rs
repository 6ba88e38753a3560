//! C ABI for generating cases, running a trained model and scoring masks.
//!
//! Every fallible call returns a [`BcsiStatus`]; on failure the message is
//! available from [`bcsi_last_error`] on the same thread. Handles are opaque
//! and owned by the caller, who releases them with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use bcsi::metrics::{case_metrics, BinaryMask, VolumePredictor};
use bcsi::synthdata::{generate_case, GeneratorParams, Volume};
use bcsi::tensor::Tensor;
use bcsi::trainer::{NetPredictor, TrainConfig};
use bcsi::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BcsiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    Numerical = 7,
    Panic = 8,
}

impl From<&Error> for BcsiStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } => BcsiStatus::Shape,
            Error::Config(_) | Error::Placement { .. } => BcsiStatus::Config,
            Error::Io { .. } | Error::MissingCase { .. } => BcsiStatus::Io,
            Error::BadMagic { .. } | Error::Truncated { .. } | Error::Format(_) | Error::Json(_) => BcsiStatus::Format,
            Error::Numerical(_) => BcsiStatus::Numerical,
            Error::Domain { .. } | Error::InvalidArgument(_) | Error::EmptyMask | Error::EmptyQueue => {
                BcsiStatus::InvalidArgument
            }
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior NULs removed"));
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (BcsiStatus, String)>) -> BcsiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BcsiStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BcsiStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (BcsiStatus, String) {
    ((&e).into(), e.to_string())
}

fn null(what: &str) -> (BcsiStatus, String) {
    (BcsiStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (BcsiStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (BcsiStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn bcsi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// NUL-terminated library version.
#[no_mangle]
pub extern "C" fn bcsi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Dense `D×H×W` volume of doubles, row-major with `W` fastest.
pub struct BcsiVolume {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl BcsiVolume {
    fn from_tensor(t: &Tensor) -> Result<Self, (BcsiStatus, String)> {
        let s = t.shape();
        if s.len() < 3 || s[..s.len() - 3].iter().any(|&d| d != 1) {
            return Err((BcsiStatus::Shape, format!("not a single volume: {s:?}")));
        }
        let n = s.len();
        Ok(BcsiVolume { dims: [s[n - 3], s[n - 2], s[n - 1]], data: t.data().to_vec() })
    }
}

fn boxed<T>(out: *mut *mut T, value: T) {
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Copies `d·h·w` doubles from `data` into a new volume.
///
/// # Safety
/// `data` must point to `d·h·w` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bcsi_volume_new(d: usize, h: usize, w: usize, data: *const f64, out: *mut *mut BcsiVolume) -> BcsiStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = d.checked_mul(h).and_then(|x| x.checked_mul(w)).filter(|&n| n > 0);
        let n = n.ok_or_else(|| (BcsiStatus::InvalidArgument, format!("invalid dims {d}×{h}×{w}")))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        boxed(out, BcsiVolume { dims: [d, h, w], data: values });
        Ok(())
    })
}

/// Writes the three extents of `v` into `dims`.
///
/// # Safety
/// `v` must be a live volume handle and `dims` point to three writable sizes.
#[no_mangle]
pub unsafe extern "C" fn bcsi_volume_dims(v: *const BcsiVolume, dims: *mut usize) -> BcsiStatus {
    guard(|| {
        let v = v.as_ref().ok_or_else(|| null("volume"))?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&v.dims);
        Ok(())
    })
}

/// Borrows the voxel buffer of `v`; valid until `v` is freed.
///
/// # Safety
/// `v` must be a live volume handle; `data` and `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bcsi_volume_data(v: *const BcsiVolume, data: *mut *const f64, len: *mut usize) -> BcsiStatus {
    guard(|| {
        let v = v.as_ref().ok_or_else(|| null("volume"))?;
        if data.is_null() || len.is_null() {
            return Err(null("output pointer"));
        }
        *data = v.data.as_ptr();
        *len = v.data.len();
        Ok(())
    })
}

/// Releases a volume; null is ignored.
///
/// # Safety
/// `v` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bcsi_volume_free(v: *mut BcsiVolume) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Generates one synthetic case. `params_json` holds generator parameters
/// (any subset of the keys; null for the defaults). The label volume holds
/// 0/1 values.
///
/// # Safety
/// `params_json` must be null or NUL-terminated; `image` and `label` writable.
#[no_mangle]
pub unsafe extern "C" fn bcsi_generate_case(
    seed: u64,
    params_json: *const c_char,
    image: *mut *mut BcsiVolume,
    label: *mut *mut BcsiVolume,
) -> BcsiStatus {
    guard(|| {
        if image.is_null() || label.is_null() {
            return Err(null("output pointer"));
        }
        let params: GeneratorParams = if params_json.is_null() {
            GeneratorParams::default()
        } else {
            let text = str_arg(params_json, "params_json")?;
            parse_params(text)?
        };
        let (vol, lab) = generate_case(seed, &params).map_err(lib_err)?;
        let lab_data = lab.mask().iter().map(|&m| f64::from(m)).collect();
        boxed(image, BcsiVolume { dims: vol.dims(), data: vol.voxels().to_vec() });
        boxed(label, BcsiVolume { dims: lab.dims(), data: lab_data });
        Ok(())
    })
}

fn parse_params(text: &str) -> Result<GeneratorParams, (BcsiStatus, String)> {
    let params: GeneratorParams = serde_json::from_str(text).map_err(|e| lib_err(e.into()))?;
    params.validate().map_err(lib_err)?;
    Ok(params)
}

/// Consistency-weight ramp `λ_u(t)`.
#[no_mangle]
pub extern "C" fn bcsi_lambda_u(t: usize, t_max: usize) -> f64 {
    if t_max == 0 {
        return f64::NAN;
    }
    bcsi::losses::lambda_u(t, t_max)
}

/// A trained network ready for full-volume inference.
pub struct BcsiModel {
    inner: NetPredictor,
}

/// Loads the network described by the JSON config at `config_path` with
/// weights from the training checkpoint at `checkpoint_path`.
///
/// # Safety
/// Both paths must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bcsi_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut BcsiModel,
) -> BcsiStatus {
    guard(|| {
        let cfg = str_arg(config_path, "config_path")?;
        let ckpt = str_arg(checkpoint_path, "checkpoint_path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = TrainConfig::load(Path::new(cfg)).map_err(lib_err)?;
        let inner = NetPredictor::from_checkpoint(Path::new(ckpt), cfg.network).map_err(lib_err)?;
        boxed(out, BcsiModel { inner });
        Ok(())
    })
}

/// Foreground probabilities for `image`, same extents.
///
/// # Safety
/// `model` and `image` must be live handles; `probs` writable.
#[no_mangle]
pub unsafe extern "C" fn bcsi_model_predict(model: *const BcsiModel, image: *const BcsiVolume, probs: *mut *mut BcsiVolume) -> BcsiStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let image = image.as_ref().ok_or_else(|| null("image"))?;
        if probs.is_null() {
            return Err(null("probs"));
        }
        let vol = Volume::new(image.dims, image.data.clone()).map_err(lib_err)?;
        let p = model.inner.predict_volume(&vol).map_err(lib_err)?;
        boxed(probs, BcsiVolume::from_tensor(&p)?);
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bcsi_model_free(m: *mut BcsiModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Dice and Jaccard in percent, distances in voxels. When either mask is
/// empty `has_distances` is 0 and both distances are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BcsiMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
    pub has_distances: i32,
}

/// Scores `pred > threshold` against the binary `gt` (`gt > 0.5`).
///
/// # Safety
/// `pred` and `gt` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bcsi_case_metrics(
    pred: *const BcsiVolume,
    gt: *const BcsiVolume,
    threshold: f64,
    out: *mut BcsiMetrics,
) -> BcsiStatus {
    guard(|| {
        let pred = pred.as_ref().ok_or_else(|| null("pred"))?;
        let gt = gt.as_ref().ok_or_else(|| null("gt"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if pred.dims != gt.dims {
            return Err((BcsiStatus::Shape, format!("pred {:?} vs gt {:?}", pred.dims, gt.dims)));
        }
        let p = BinaryMask::new(pred.dims, pred.data.iter().map(|&v| v > threshold).collect()).map_err(lib_err)?;
        let g = BinaryMask::new(gt.dims, gt.data.iter().map(|&v| v > 0.5).collect()).map_err(lib_err)?;
        let m = case_metrics(0, &p, &g).map_err(lib_err)?;
        *out = BcsiMetrics {
            dice: m.dice,
            jaccard: m.jaccard,
            hd95: m.hd95.unwrap_or(f64::NAN),
            asd: m.asd.unwrap_or(f64::NAN),
            has_distances: i32::from(m.hd95.is_some()),
        };
        Ok(())
    })
}
