//! C ABI over the splitleak simulator.
//!
//! Every fallible call returns an [`SlStatus`]; on failure the message is
//! available from [`sl_last_error`] on the same thread. Matrices and attack
//! results are opaque heap handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use splitleak::attacks::{self, AssignmentRule, AttackPrior, LeakMode, SpectralAttackResult};
use splitleak::experiment::{run_experiment, ExperimentConfig};
use splitleak::numerics::{self, Matrix};
use splitleak::{dcor, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Degenerate = 4,
    Config = 5,
    Protocol = 6,
    Io = 7,
    Internal = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlAssignmentRule {
    BySize = 0,
    ByScore = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlLeakMode {
    Scores = 0,
    HardLabels = 1,
}

/// Row-major matrix of f64.
pub struct SlMatrix(Matrix);

/// Output of one spectral attack.
pub struct SlAttackResult(SpectralAttackResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SlStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::EmptyMatrix | Error::TooFewSamples { .. } => SlStatus::ShapeMismatch,
        Error::NonFinite(_) | Error::InvalidLabel(_) | Error::IndexOutOfRange { .. } => SlStatus::InvalidArgument,
        Error::SingleClass
        | Error::DegenerateSpectrum
        | Error::DegenerateScores
        | Error::DegenerateLabels
        | Error::DegenerateEmbeddings => SlStatus::Degenerate,
        Error::Config(_) | Error::MissingLabelColumn | Error::Json(_) => SlStatus::Config,
        Error::Protocol(_) | Error::StaleCache => SlStatus::Protocol,
        Error::Io(_) | Error::Csv(_) | Error::MalformedRow { .. } | Error::UnparseableReal { .. } => SlStatus::Io,
        Error::Checkpoint(_) => SlStatus::Internal,
    }
}

struct Fail(SlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside splitleak".into());
            SlStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(SlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn matrix<'a>(m: *const SlMatrix) -> Result<&'a Matrix, Fail> {
    m.as_ref().map(|m| &m.0).ok_or_else(|| null("matrix"))
}

unsafe fn result<'a>(r: *const SlAttackResult) -> Result<&'a SpectralAttackResult, Fail> {
    r.as_ref().map(|r| &r.0).ok_or_else(|| null("attack result"))
}

fn check_len(expected: usize, got: usize, what: &str) -> Result<(), Fail> {
    if expected != got {
        return Err(Fail(
            SlStatus::ShapeMismatch,
            format!("{what}: expected length {expected}, got {got}"),
        ));
    }
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn sl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `rows * cols` row-major values into a new matrix.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_matrix_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut SlMatrix,
) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Fail(SlStatus::InvalidArgument, "rows * cols overflows".into()))?;
        let values = slice(data, len, "data")?.to_vec();
        let m = Matrix::new(rows, cols, values)?;
        *out = Box::into_raw(Box::new(SlMatrix(m)));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a live handle from [`sl_matrix_new`].
#[no_mangle]
pub unsafe extern "C" fn sl_matrix_rows(m: *const SlMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// # Safety
/// `m` must be null or a live handle from [`sl_matrix_new`].
#[no_mangle]
pub unsafe extern "C" fn sl_matrix_cols(m: *const SlMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// # Safety
/// `m` must be null or a handle from [`sl_matrix_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_matrix_free(m: *mut SlMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Rank-based AUC of `scores` against 0/1 `labels`.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = slice(scores, n, "scores")?;
        let y = slice(labels, n, "labels")?;
        *out = numerics::auc(s, y)?;
        Ok(())
    })
}

/// Sample distance correlation between the rows of `m` and scalar `labels`.
///
/// # Safety
/// `labels` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_distance_correlation(
    m: *const SlMatrix,
    labels: *const f64,
    n: usize,
    out: *mut f64,
) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = matrix(m)?;
        let y = slice(labels, n, "labels")?;
        *out = dcor::distance_correlation(m, y)?.0;
        Ok(())
    })
}

/// Runs the spectral attack on one batch. A NaN `expected_positive_ratio`
/// means no prior ratio.
///
/// # Safety
/// `m` must be a live matrix handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_spectral_attack(
    m: *const SlMatrix,
    rule: SlAssignmentRule,
    expected_positive_ratio: f64,
    out: *mut *mut SlAttackResult,
) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = matrix(m)?;
        let prior = AttackPrior {
            rule: match rule {
                SlAssignmentRule::BySize => AssignmentRule::BySize,
                SlAssignmentRule::ByScore => AssignmentRule::ByScore,
            },
            expected_positive_ratio: (!expected_positive_ratio.is_nan()).then_some(expected_positive_ratio),
        };
        let r = attacks::spectral_attack(m, &prior)?;
        *out = Box::into_raw(Box::new(SlAttackResult(r)));
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a live attack result.
#[no_mangle]
pub unsafe extern "C" fn sl_attack_result_len(r: *const SlAttackResult) -> usize {
    r.as_ref().map_or(0, |r| r.0.scores.len())
}

/// 1 if the attack abstained, 0 otherwise, -1 for a null handle.
///
/// # Safety
/// `r` must be null or a live attack result.
#[no_mangle]
pub unsafe extern "C" fn sl_attack_result_degenerate(r: *const SlAttackResult) -> i32 {
    r.as_ref().map_or(-1, |r| i32::from(r.0.degenerate))
}

/// # Safety
/// `r` must be null or a live attack result.
#[no_mangle]
pub unsafe extern "C" fn sl_attack_result_boundary(r: *const SlAttackResult) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.0.boundary)
}

/// Writes the per-row attack scores for `mode` into `out` (length `len`).
///
/// # Safety
/// `r` must be a live attack result; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sl_attack_result_scores(
    r: *const SlAttackResult,
    mode: SlLeakMode,
    out: *mut f64,
    len: usize,
) -> SlStatus {
    guard(|| {
        let r = result(r)?;
        check_len(r.scores.len(), len, "scores buffer")?;
        let mode = match mode {
            SlLeakMode::Scores => LeakMode::Scores,
            SlLeakMode::HardLabels => LeakMode::HardLabels,
        };
        slice_mut(out, len, "out")?.copy_from_slice(&r.attack_scores(mode));
        Ok(())
    })
}

/// Writes the 0/1 hard labels into `out` (length `len`).
///
/// # Safety
/// `r` must be a live attack result; `out` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sl_attack_result_hard_labels(r: *const SlAttackResult, out: *mut u8, len: usize) -> SlStatus {
    guard(|| {
        let r = result(r)?;
        check_len(r.hard_labels.len(), len, "labels buffer")?;
        slice_mut(out, len, "out")?.copy_from_slice(&r.hard_labels);
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a result not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_attack_result_free(r: *mut SlAttackResult) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Per-row gradient norms, written into `out` (length `len` = rows).
///
/// # Safety
/// `grad` must be a live matrix handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sl_norm_attack(grad: *const SlMatrix, out: *mut f64, len: usize) -> SlStatus {
    guard(|| {
        let g = matrix(grad)?;
        check_len(g.rows(), len, "norm buffer")?;
        let s = attacks::norm_attack(g)?;
        slice_mut(out, len, "out")?.copy_from_slice(&s);
        Ok(())
    })
}

/// AUC of attack scores against true labels.
///
/// # Safety
/// Same contract as [`sl_auc`].
#[no_mangle]
pub unsafe extern "C" fn sl_leak_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = attacks::leak_auc(slice(scores, n, "scores")?, slice(labels, n, "labels")?)?;
        Ok(())
    })
}

/// Trains one experiment from a JSON config. On success `*out` receives a
/// JSON object `{"records": [...], "audit_violations": [...]}` to be released
/// with [`sl_string_free`].
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_experiment_run(config_json: *const c_char, out: *mut *mut c_char) -> SlStatus {
    guard(|| {
        if config_json.is_null() {
            return Err(null("config_json"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(config_json)
            .to_str()
            .map_err(|e| Fail(SlStatus::InvalidArgument, format!("config is not UTF-8: {e}")))?;
        let cfg = ExperimentConfig::from_json(text)?;
        let outcome = run_experiment(&cfg, None, None)?;
        let body = serde_json::json!({
            "records": outcome.records,
            "audit_violations": outcome.audit.violations(),
        });
        let s = CString::new(body.to_string()).map_err(|e| Fail(SlStatus::Internal, e.to_string()))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
