//! C ABI over the brainrot library. Objects are opaque handles created by
//! `*_load` functions and released with the matching `*_free`. Every
//! fallible call returns a [`BrStatus`]; the message of the most recent
//! failure on the calling thread is available from
//! [`br_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use brainrot::config::{parse_config_text, RunConfig};
use brainrot::eval::{association, compute_metrics, ContingencyTable};
use brainrot::pipeline::{run, Stage};
use brainrot::regressor::{regressor_forward, RegressorParams};
use brainrot::volume::{load_volume, Volume};
use brainrot::vit::{build_feature_map, ViTParams};
use brainrot::Error;
use ndarray::ArrayView2;

/// Result codes shared by every function in this interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrStatus {
    Ok = 0,
    Io = 1,
    Format = 2,
    Shape = 3,
    InvalidArgument = 4,
    Config = 5,
    MissingArtifact = 6,
    Divergence = 7,
    NullPointer = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&Error> for BrStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => BrStatus::Io,
            Error::Format(_) | Error::Csv(_) | Error::Json(_) => BrStatus::Format,
            Error::Shape(_) => BrStatus::Shape,
            Error::InvalidArgument(_) => BrStatus::InvalidArgument,
            Error::Config(_) => BrStatus::Config,
            Error::MissingArtifact(_) => BrStatus::MissingArtifact,
            Error::Divergence { .. } => BrStatus::Divergence,
        }
    }
}

/// Opaque intensity volume.
pub struct BrVolume(Volume);

/// Opaque frozen ViT encoder.
pub struct BrVit(ViTParams);

/// Opaque stage-2 regressor.
pub struct BrRegressor(RegressorParams);

/// Regression metrics. Undefined correlations are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BrMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub r2: f64,
    pub n: usize,
}

/// 2×2 association statistics with 95% confidence bounds.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BrAssociation {
    pub odds_ratio: f64,
    pub or_lo: f64,
    pub or_hi: f64,
    pub relative_risk: f64,
    pub rr_lo: f64,
    pub rr_hi: f64,
    pub p_value: f64,
    /// 1 when the +0.5 zero-cell correction was applied.
    pub corrected: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Fail {
    Lib(Error),
    Status(BrStatus, String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard<F>(f: F) -> BrStatus
where
    F: FnOnce() -> Result<(), Fail>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BrStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            BrStatus::from(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            BrStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(BrStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(BrStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn opt_str(p: *const c_char, what: &str) -> Result<Option<String>, Fail> {
    if p.is_null() {
        return Ok(None);
    }
    Ok(Some(path_arg(p, what)?.display().to_string()))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn br_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message on this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn br_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a `.brv` volume.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn br_volume_load(path: *const c_char, out: *mut *mut BrVolume) -> BrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let v = load_volume(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(BrVolume(v)));
        Ok(())
    })
}

/// Writes the volume's S, H, W into `dims`.
///
/// # Safety
/// `vol` must come from [`br_volume_load`]; `dims` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn br_volume_dims(vol: *const BrVolume, dims: *mut usize) -> BrStatus {
    guard(|| {
        let v = handle(vol, "vol")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        for (i, d) in v.0.dims.iter().enumerate() {
            *dims.add(i) = *d;
        }
        Ok(())
    })
}

/// # Safety
/// `vol` must be null or come from [`br_volume_load`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn br_volume_free(vol: *mut BrVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Loads a ViT encoder archive.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn br_vit_load(path: *const c_char, out: *mut *mut BrVit) -> BrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let p = ViTParams::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(BrVit(p)));
        Ok(())
    })
}

/// Embedding width d of the encoder.
///
/// # Safety
/// `vit` must come from [`br_vit_load`].
#[no_mangle]
pub unsafe extern "C" fn br_vit_embed_dim(vit: *const BrVit, out: *mut usize) -> BrStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(vit, "vit")?.0.arch.embed_dim;
        Ok(())
    })
}

/// # Safety
/// `vit` must be null or come from [`br_vit_load`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn br_vit_free(vit: *mut BrVit) {
    if !vit.is_null() {
        drop(Box::from_raw(vit));
    }
}

/// Loads a regressor archive.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn br_regressor_load(path: *const c_char, out: *mut *mut BrRegressor) -> BrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let p = RegressorParams::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(BrRegressor(p)));
        Ok(())
    })
}

/// # Safety
/// `reg` must be null or come from [`br_regressor_load`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn br_regressor_free(reg: *mut BrRegressor) {
    if !reg.is_null() {
        drop(Box::from_raw(reg));
    }
}

/// Encodes every sagittal slice into a row-major S×d matrix written to `buf`.
/// Fails with `BufferTooSmall` if `len < S·d`.
///
/// # Safety
/// Handles must be valid; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn br_feature_map(
    vol: *const BrVolume,
    vit: *const BrVit,
    buf: *mut f64,
    len: usize,
) -> BrStatus {
    guard(|| {
        let (v, e) = (handle(vol, "vol")?, handle(vit, "vit")?);
        if buf.is_null() {
            return Err(null("buf"));
        }
        let need = v.0.dims[0] * e.0.arch.embed_dim;
        if len < need {
            return Err(Fail::Status(
                BrStatus::BufferTooSmall,
                format!("feature map needs {need} values, buffer holds {len}"),
            ));
        }
        let f = build_feature_map(&v.0, &e.0)?;
        for (i, x) in f.z.iter().enumerate() {
            *buf.add(i) = *x;
        }
        Ok(())
    })
}

/// Predicts brain age from a row-major `rows×cols` embedding matrix.
/// `sigma2` (optional) receives the predicted variance, or NaN for MSE models.
///
/// # Safety
/// `reg` must be valid and `z` must point to `rows·cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn br_predict_features(
    reg: *const BrRegressor,
    z: *const f64,
    rows: usize,
    cols: usize,
    sex: u8,
    age: *mut f64,
    sigma2: *mut f64,
) -> BrStatus {
    guard(|| {
        let r = handle(reg, "reg")?;
        if z.is_null() {
            return Err(null("z"));
        }
        let out = out_ptr(age, "age")?;
        let data = std::slice::from_raw_parts(z, rows * cols);
        let view = ArrayView2::from_shape((rows, cols), data)
            .map_err(|e| Fail::Status(BrStatus::Shape, e.to_string()))?;
        let o = regressor_forward(view, sex, &r.0)?;
        *out = o.mean;
        if let Some(s) = sigma2.as_mut() {
            *s = o.sigma2().unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Full two-stage prediction for one volume, using the sex stored in its header.
///
/// # Safety
/// All handles must be valid; `age` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn br_predict_volume(
    vol: *const BrVolume,
    vit: *const BrVit,
    reg: *const BrRegressor,
    age: *mut f64,
) -> BrStatus {
    guard(|| {
        let (v, e, r) = (handle(vol, "vol")?, handle(vit, "vit")?, handle(reg, "reg")?);
        let out = out_ptr(age, "age")?;
        let f = build_feature_map(&v.0, &e.0)?;
        *out = regressor_forward(f.z.view(), v.0.sex, &r.0)?.mean;
        Ok(())
    })
}

/// MAE, RMSE, Pearson, Spearman and R² of `n` predictions.
///
/// # Safety
/// `preds` and `targets` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn br_compute_metrics(
    preds: *const f64,
    targets: *const f64,
    n: usize,
    out: *mut BrMetrics,
) -> BrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if preds.is_null() || targets.is_null() {
            return Err(null("preds/targets"));
        }
        let p = std::slice::from_raw_parts(preds, n);
        let t = std::slice::from_raw_parts(targets, n);
        let m = compute_metrics(p, t)?;
        *out = BrMetrics {
            mae: m.mae,
            rmse: m.rmse,
            pearson_r: m.pearson_r.unwrap_or(f64::NAN),
            spearman_rho: m.spearman_rho.unwrap_or(f64::NAN),
            r2: m.r2.unwrap_or(f64::NAN),
            n: m.n,
        };
        Ok(())
    })
}

/// Odds ratio, relative risk and Fisher exact p for the table
/// (exposed-case, exposed-control, unexposed-case, unexposed-control).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn br_association(a: u64, b: u64, c: u64, d: u64, out: *mut BrAssociation) -> BrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let s = association(&ContingencyTable::new(a, b, c, d))?;
        *out = BrAssociation {
            odds_ratio: s.or.point,
            or_lo: s.or.lo,
            or_hi: s.or.hi,
            relative_risk: s.rr.point,
            rr_lo: s.rr.lo,
            rr_hi: s.rr.hi,
            p_value: s.p,
            corrected: i32::from(s.corrected()),
        };
        Ok(())
    })
}

/// Runs a pipeline subcommand (`"synth"`, `"train"`, `"pipeline"`, ...).
/// `config_path` and `out_dir` may be null; `out_dir` overrides `io.out`.
///
/// # Safety
/// Non-null pointers must be valid C strings.
#[no_mangle]
pub unsafe extern "C" fn br_run_stage(
    stage: *const c_char,
    config_path: *const c_char,
    out_dir: *const c_char,
) -> BrStatus {
    guard(|| {
        let name = opt_str(stage, "stage")?.ok_or_else(|| null("stage"))?;
        let stage: Stage = name.parse()?;
        let mut entries = match opt_str(config_path, "config_path")? {
            Some(p) => {
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| Error::Config(format!("cannot read config {p}: {e}")))?;
                parse_config_text(&text)?
            }
            None => Default::default(),
        };
        if let Some(o) = opt_str(out_dir, "out_dir")? {
            entries.insert("io.out".into(), o);
        }
        let cfg = RunConfig::from_entries(&entries)?;
        run(stage, &cfg)?;
        Ok(())
    })
}
