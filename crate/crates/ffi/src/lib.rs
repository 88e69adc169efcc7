//! C ABI over `induction_lab`.
//!
//! Every function returns a [`LabStatus`] and writes results through out
//! pointers. Objects are opaque handles released with their `_free` function.
//! On failure the message is kept per thread and read with
//! [`lab_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use induction_lab::evalkit::{self, Mechanism};
use induction_lab::model::{embed_tokens, predict_token};
use induction_lab::{checkpoint, diversity, oracle, trainer};
use induction_lab::{LabError, LengthDistribution, ModelParams, SamplerConfig, TrainConfig};

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Io = 4,
    Parse = 5,
    Resource = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabMechanism {
    Positional = 0,
    Induction = 1,
}

/// Opaque length distribution.
pub struct LabDistribution(LengthDistribution);

/// Opaque trained or loaded model.
pub struct LabModel(ModelParams);

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct LabTrainOptions {
    pub eta_v: f64,
    pub eta_kq: f64,
    pub m_v: usize,
    pub m_kq: usize,
    pub seed: u64,
    pub reuse_samples: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LabDims {
    pub n: usize,
    pub n_trg: usize,
    pub l: usize,
    pub d: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct LabProbe {
    pub induction_strength: f64,
    pub max_positional_strength: f64,
    pub dominant: LabMechanism,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LabMetrics {
    pub ood_accuracy: f64,
    pub pseudo_rate: f64,
    pub leftmost_rate: f64,
    pub n_samples: usize,
}

/// Certifier verdict. `witness_ell1` and `witness_ell2` are 0 when there is no witness.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LabCertificate {
    pub generalizes: bool,
    pub factor_two: bool,
    pub margin: f64,
    pub witness_ell1: usize,
    pub witness_ell2: usize,
    pub pairs_checked: usize,
    pub failing_pairs: usize,
    pub max_sum_ratio: f64,
    pub max_sum_ratio_t: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(LabStatus, String);

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        let status = match &e {
            LabError::InvalidConfig(_) | LabError::LengthOverflow { .. } | LabError::InvalidRange { .. } => {
                LabStatus::InvalidConfig
            }
            LabError::Io(_) => LabStatus::Io,
            LabError::Parse { .. } | LabError::Json(_) | LabError::Csv(_) => LabStatus::Parse,
            LabError::Resource(_) => LabStatus::Resource,
            _ => LabStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(LabStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LabStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LabStatus::Panic
        }
    }
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn to_path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(LabStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the length needed including the NUL, or 0 when
/// there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lab_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n - 1) = 0;
            }
            bytes.len()
        }
    })
}

/// Distribution with the given support and masses (masses sum to 1).
///
/// # Safety
/// `support` and `masses` must point to `len` readable elements; `out_dist` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lab_distribution_new(
    support: *const usize,
    masses: *const f64,
    len: usize,
    out_dist: *mut *mut LabDistribution,
) -> LabStatus {
    guard(|| {
        let o = out(out_dist, "out_dist")?;
        let s = slice(support, len, "support")?.to_vec();
        let m = slice(masses, len, "masses")?.to_vec();
        *o = boxed(LabDistribution(LengthDistribution::new(s, m)?));
        Ok(())
    })
}

/// Uniform distribution on `lo..=hi`.
///
/// # Safety
/// `out_dist` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lab_distribution_uniform(
    lo: usize,
    hi: usize,
    out_dist: *mut *mut LabDistribution,
) -> LabStatus {
    guard(|| {
        let o = out(out_dist, "out_dist")?;
        *o = boxed(LabDistribution(LengthDistribution::uniform(lo, hi)?));
        Ok(())
    })
}

/// Minimum-cost distribution with max-sum ratio `1 / n_trg` on horizon `u`.
///
/// # Safety
/// `out_dist` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lab_distribution_optimal(
    n_trg: usize,
    u: usize,
    out_dist: *mut *mut LabDistribution,
) -> LabStatus {
    guard(|| {
        let o = out(out_dist, "out_dist")?;
        *o = boxed(LabDistribution(diversity::optimal_distribution(n_trg, u)?));
        Ok(())
    })
}

/// # Safety
/// `dist` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lab_distribution_free(dist: *mut LabDistribution) {
    if !dist.is_null() {
        drop(Box::from_raw(dist));
    }
}

/// # Safety
/// `dist` must be a live handle and `out_ratio` writable.
#[no_mangle]
pub unsafe extern "C" fn lab_distribution_max_sum_ratio(
    dist: *const LabDistribution,
    out_ratio: *mut f64,
) -> LabStatus {
    guard(|| {
        let d = dist.as_ref().ok_or_else(|| null("dist"))?;
        *out(out_ratio, "out_ratio")? = diversity::max_sum_ratio(&d.0);
        Ok(())
    })
}

/// Default training options.
#[no_mangle]
pub extern "C" fn lab_train_options_default() -> LabTrainOptions {
    let t = TrainConfig::default();
    LabTrainOptions {
        eta_v: t.eta_v,
        eta_kq: t.eta_kq,
        m_v: t.m_v,
        m_kq: t.m_kq,
        seed: t.seed,
        reuse_samples: t.reuse_samples,
    }
}

/// Runs the two-stage one-step training. `options` may be null for defaults.
///
/// # Safety
/// `dist` must be a live handle, `options` null or readable, `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn lab_model_train(
    n: usize,
    n_trg: usize,
    l: usize,
    dist: *const LabDistribution,
    options: *const LabTrainOptions,
    out_model: *mut *mut LabModel,
) -> LabStatus {
    guard(|| {
        let o = out(out_model, "out_model")?;
        let d = dist.as_ref().ok_or_else(|| null("dist"))?;
        let opts = options.as_ref().copied().unwrap_or_else(|| lab_train_options_default());
        let cfg = SamplerConfig::new(n, n_trg, l)?;
        let tc = TrainConfig {
            eta_v: opts.eta_v,
            eta_kq: opts.eta_kq,
            m_v: opts.m_v,
            m_kq: opts.m_kq,
            seed: opts.seed,
            reuse_samples: opts.reuse_samples,
        };
        *o = boxed(LabModel(trainer::run_algorithm1(&cfg, &d.0, &tc)?));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn lab_model_load(path: *const c_char, out_model: *mut *mut LabModel) -> LabStatus {
    guard(|| {
        let o = out(out_model, "out_model")?;
        *o = boxed(LabModel(checkpoint::load(&to_path(path)?)?));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lab_model_save(model: *const LabModel, path: *const c_char) -> LabStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        checkpoint::save(&m.0, &to_path(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lab_model_free(model: *mut LabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out_dims` writable.
#[no_mangle]
pub unsafe extern "C" fn lab_model_dims(model: *const LabModel, out_dims: *mut LabDims) -> LabStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = m.0.cfg;
        *out(out_dims, "out_dims")? = LabDims {
            n: c.n,
            n_trg: c.n_trg,
            l: c.l,
            d: c.d(),
        };
        Ok(())
    })
}

/// Predicts the token after `tokens[0..len]` (1-indexed ids, query last).
///
/// # Safety
/// `model` must be a live handle, `tokens` readable for `len`, `out_token` writable.
#[no_mangle]
pub unsafe extern "C" fn lab_model_predict(
    model: *const LabModel,
    tokens: *const usize,
    len: usize,
    out_token: *mut usize,
) -> LabStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let t = slice(tokens, len, "tokens")?;
        let x = embed_tokens(t, len, &m.0.cfg)?;
        *out(out_token, "out_token")? = predict_token(&x, &m.0);
        Ok(())
    })
}

/// Induction versus positional-shortcut strength of `W_KQ` over `dist`'s support.
///
/// # Safety
/// `model` and `dist` must be live handles and `out_probe` writable.
#[no_mangle]
pub unsafe extern "C" fn lab_model_probe(
    model: *const LabModel,
    dist: *const LabDistribution,
    out_probe: *mut LabProbe,
) -> LabStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = dist.as_ref().ok_or_else(|| null("dist"))?;
        let p = evalkit::probe_mechanism(&m.0, &d.0)?;
        *out(out_probe, "out_probe")? = LabProbe {
            induction_strength: p.induction_strength,
            max_positional_strength: p.max_positional(),
            dominant: match p.dominant {
                Mechanism::Positional => LabMechanism::Positional,
                Mechanism::Induction => LabMechanism::Induction,
            },
        };
        Ok(())
    })
}

/// OOD accuracy, pseudo rate and leftmost rate over `n` sequences.
///
/// # Safety
/// `model` must be a live handle and `out_metrics` writable.
#[no_mangle]
pub unsafe extern "C" fn lab_model_eval_ood(
    model: *const LabModel,
    ell_min: usize,
    ell_max: usize,
    n: usize,
    seed: u64,
    out_metrics: *mut LabMetrics,
) -> LabStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let r = evalkit::eval_ood(&m.0, ell_min, ell_max, n, seed)?;
        *out(out_metrics, "out_metrics")? = LabMetrics {
            ood_accuracy: r.ood_accuracy,
            pseudo_rate: r.pseudo_rate,
            leftmost_rate: r.leftmost_rate,
            n_samples: r.n_samples,
        };
        Ok(())
    })
}

/// Certifies OOD generalization of the population-limit model trained on `dist`.
///
/// # Safety
/// `dist` must be a live handle and `out_cert` writable.
#[no_mangle]
pub unsafe extern "C" fn lab_certify(
    n: usize,
    n_trg: usize,
    l: usize,
    dist: *const LabDistribution,
    out_cert: *mut LabCertificate,
) -> LabStatus {
    guard(|| {
        let d = dist.as_ref().ok_or_else(|| null("dist"))?;
        let o = out(out_cert, "out_cert")?;
        let cfg = SamplerConfig::new(n, n_trg, l)?;
        cfg.check_distribution(&d.0)?;
        let c = oracle::certify_ood(&d.0, &cfg);
        let (w1, w2) = c.witness_pair.unwrap_or((0, 0));
        *o = LabCertificate {
            generalizes: c.generalizes,
            factor_two: c.factor_two,
            margin: c.margin,
            witness_ell1: w1,
            witness_ell2: w2,
            pairs_checked: c.pairs_checked,
            failing_pairs: c.failing_pairs,
            max_sum_ratio: c.max_sum_ratio,
            max_sum_ratio_t: c.max_sum_ratio_t,
        };
        Ok(())
    })
}
