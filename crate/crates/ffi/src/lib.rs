//! C ABI over the `deepflow` library: train from a JSON run configuration,
//! load a checkpoint behind an opaque handle, and draw samples into a caller
//! buffer.
//!
//! Every fallible function returns a `DfStatus`. On failure, a message is kept
//! per thread and can be read back with `df_last_error`. Panics never cross
//! the boundary; they surface as `DF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use deepflow::foundation::{ParamSet, RngStream};
use deepflow::io::{parse_run_config, Checkpoint, RunConfig};
use deepflow::network::DeepFlowModel;
use deepflow::sampling::{sample, ModelField, SamplerKind};
use deepflow::training::{train_loop, Trainer};
use deepflow::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Checkpoint = 4,
    Io = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DfSamplerKind {
    Ode = 0,
    Sde = 1,
}

/// Sampler settings; fill with `df_model_sampler_options` to start from the
/// checkpoint's own configuration.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DfSamplerOptions {
    pub kind: DfSamplerKind,
    pub steps: u32,
    pub cfg_scale: f64,
    pub seed: u64,
}

/// A loaded checkpoint: model and EMA weights.
pub struct DfModel {
    run: RunConfig,
    model: DeepFlowModel,
    ema: ParamSet<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> DfStatus {
    match e {
        Error::Config(_) | Error::Json(_) => DfStatus::Config,
        Error::Checkpoint(_) => DfStatus::Checkpoint,
        Error::Io { .. } => DfStatus::Io,
        Error::NonFinite(_) => DfStatus::Numeric,
        _ => DfStatus::InvalidArgument,
    }
}

struct Fail(DfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DfStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(DfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DfStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn null(what: &str) -> Fail {
    Fail(DfStatus::NullPointer, format!("{what} is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn df_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn df_last_error(buf: *mut c_char, len: usize) -> usize {
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

/// Train a run described by a JSON configuration. Outputs go to `out_dir`
/// when given, otherwise to the configuration's `out_dir`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out_dir` may be null.
#[no_mangle]
pub unsafe extern "C" fn df_train(config_json: *const c_char, out_dir: *const c_char) -> DfStatus {
    guard(|| {
        let text = c_str(config_json, "config_json")?;
        let mut run = parse_run_config(text)?;
        if !out_dir.is_null() {
            run.out_dir = c_str(out_dir, "out_dir")?.to_string();
        }
        let dir = PathBuf::from(&run.out_dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        std::fs::write(dir.join("config.json"), run.to_json()).map_err(|e| Error::io(&dir, e))?;
        let mut trainer = Trainer::new(&run)?;
        train_loop(&mut trainer, Some(&dir))?;
        Ok(())
    })
}

/// Load a checkpoint. On success `*out` owns a handle to release with
/// `df_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn df_model_load(path: *const c_char, out: *mut *mut DfModel) -> DfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        let model = DeepFlowModel::new(&ckpt.run_config.model)?;
        model.check_params(&ckpt.ema)?;
        let handle = DfModel {
            run: ckpt.run_config,
            model,
            ema: ckpt.ema,
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Release a handle from `df_model_load`. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn df_model_free(model: *mut DfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of values in one sample (2 for planar points, C·H·W for images).
/// Returns 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn df_model_sample_numel(model: *const DfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().geometry.sample_numel())
}

/// Number of classes, 0 for an unconditional model or a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn df_model_num_classes(model: *const DfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().num_classes)
}

/// Number of branches k, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn df_model_branches(model: *const DfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().k)
}

/// The sampler settings stored with the checkpoint.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn df_model_sampler_options(model: *const DfModel, out: *mut DfSamplerOptions) -> DfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = &m.run.sampler;
        *out = DfSamplerOptions {
            kind: match s.kind {
                SamplerKind::Ode => DfSamplerKind::Ode,
                SamplerKind::Sde => DfSamplerKind::Sde,
            },
            steps: u32::try_from(s.steps).unwrap_or(u32::MAX),
            cfg_scale: s.cfg_scale,
            seed: m.run.seed,
        };
        Ok(())
    })
}

/// Draw `n` samples into `out`, row-major, `n * df_model_sample_numel`
/// values. `classes` holds `n` class ids for a conditional model and must be
/// null for an unconditional one; null on a conditional model samples the
/// classes in rotation.
///
/// # Safety
/// `model` must be a live handle, `options` valid, `classes` null or `n`
/// readable values, and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn df_sample(
    model: *const DfModel,
    options: *const DfSamplerOptions,
    n: usize,
    classes: *const u32,
    out: *mut f64,
    out_len: usize,
) -> DfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let opts = options.as_ref().ok_or_else(|| null("options"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let numel = m.model.config().geometry.sample_numel();
        let need = n
            .checked_mul(numel)
            .ok_or_else(|| Fail(DfStatus::InvalidArgument, "n is too large".into()))?;
        if out_len < need {
            return Err(Fail(
                DfStatus::BufferTooSmall,
                format!("output buffer holds {out_len} values, {need} needed"),
            ));
        }
        let c = m.model.config().num_classes;
        let ids: Option<Vec<usize>> = match (c, classes.is_null()) {
            (0, true) => None,
            (0, false) => {
                return Err(Fail(
                    DfStatus::InvalidArgument,
                    "class ids given for an unconditional model".into(),
                ))
            }
            (c, true) => Some((0..n).map(|i| i % c).collect()),
            (c, false) => {
                let raw = std::slice::from_raw_parts(classes, n);
                if let Some(&bad) = raw.iter().find(|&&y| y as usize >= c) {
                    return Err(Fail(
                        DfStatus::InvalidArgument,
                        format!("class {bad} out of range for {c} classes"),
                    ));
                }
                Some(raw.iter().map(|&y| y as usize).collect())
            }
        };
        let mut cfg = m.run.sampler.clone();
        cfg.kind = match opts.kind {
            DfSamplerKind::Ode => SamplerKind::Ode,
            DfSamplerKind::Sde => SamplerKind::Sde,
        };
        cfg.steps = opts.steps as usize;
        cfg.cfg_scale = opts.cfg_scale;
        cfg.record_trajectory = false;
        cfg.validate()?;
        let mut field = ModelField::new(&m.model, &m.ema, cfg.cfg_scale);
        let stream = RngStream::new(opts.seed, deepflow::cli::SAMPLE_STREAM);
        let samples = sample(&mut field, &cfg, n, ids.as_deref(), &stream)?.samples;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(samples.data());
        Ok(())
    })
}
