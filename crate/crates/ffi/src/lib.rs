// Copyright 2026 The fl-sampling Authors
// SPDX-License-Identifier: Apache-2.0

//! C ABI over `fl-sampling`.
//!
//! Importance vectors and schemes are opaque heap handles created by
//! `fls_*_new` and released by the matching `fls_*_free`. Every fallible
//! call returns an [`FlsStatus`]; on failure the message is available from
//! [`fls_last_error_message`] on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use fl_sampling::rng::{stream, tag};
use fl_sampling::{closed_form_stats, corollary_compare, draw, ClientImportance, Error, SchemeKind, SchemeSpec};

/// Opaque importance vector.
pub struct FlsImportance(ClientImportance);

/// Opaque sampling scheme.
pub struct FlsScheme(SchemeSpec);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidImportance = 2,
    InvalidScheme = 3,
    LengthMismatch = 4,
    SupportTooLarge = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlsSchemeKind {
    Full = 0,
    Md = 1,
    Uniform = 2,
    Binomial = 3,
    PoissonBinomial = 4,
    Clustered = 5,
    Optimal = 6,
    PoissonReweighted = 7,
}

fn scheme_kind(raw: u32) -> Option<SchemeKind> {
    const KINDS: [(FlsSchemeKind, SchemeKind); 8] = [
        (FlsSchemeKind::Full, SchemeKind::Full),
        (FlsSchemeKind::Md, SchemeKind::Md),
        (FlsSchemeKind::Uniform, SchemeKind::Uniform),
        (FlsSchemeKind::Binomial, SchemeKind::Binomial),
        (FlsSchemeKind::PoissonBinomial, SchemeKind::PoissonBinomial),
        (FlsSchemeKind::Clustered, SchemeKind::Clustered),
        (FlsSchemeKind::Optimal, SchemeKind::Optimal),
        (FlsSchemeKind::PoissonReweighted, SchemeKind::PoissonReweighted),
    ];
    KINDS.iter().find(|(k, _)| *k as u32 == raw).map(|(_, s)| *s)
}

/// Scalar closed-form statistics of a scheme.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlsStats {
    pub alpha: f64,
    /// False for clustered sampling, whose covariance is not `−α p_i p_j`.
    pub alpha_exact: bool,
    pub var_weight_sum: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub expected_clients: f64,
    /// NaN when `has_var_clients` is false.
    pub var_clients: f64,
    pub has_var_clients: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlsVerdict {
    pub uniform_better: bool,
    pub threshold: f64,
    pub sum_p_sq: f64,
    pub degenerate: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FlsStatus {
    match e {
        Error::InvalidImportance(_) => FlsStatus::InvalidImportance,
        Error::SupportTooLarge { .. } => FlsStatus::SupportTooLarge,
        Error::DimensionMismatch { .. } => FlsStatus::LengthMismatch,
        Error::InvalidScheme(_) | Error::NoScalarAlpha(_) | Error::InvalidConfig { .. } => FlsStatus::InvalidScheme,
        Error::MissingContribution(_) | Error::NonFiniteIterate { .. } => FlsStatus::Internal,
    }
}

struct Fail(FlsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FlsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FlsStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FlsStatus::Internal
        }
    }
}

unsafe fn slice<'a>(data: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, Fail> {
    h.as_ref().ok_or_else(|| null(what))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Creates an importance vector from `n` positive entries summing to 1.
///
/// # Safety
/// `p` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fls_importance_new(p: *const f64, n: usize, out: *mut *mut FlsImportance) -> FlsStatus {
    guard(|| {
        let p = slice(p, n, "p")?;
        emit(out, FlsImportance(ClientImportance::new(p.to_vec())?))
    })
}

/// Creates an importance vector proportional to `n` positive weights.
///
/// # Safety
/// As [`fls_importance_new`].
#[no_mangle]
pub unsafe extern "C" fn fls_importance_from_weights(w: *const f64, n: usize, out: *mut *mut FlsImportance) -> FlsStatus {
    guard(|| {
        let w = slice(w, n, "weights")?;
        emit(out, FlsImportance(ClientImportance::from_weights(w)?))
    })
}

/// Number of clients, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fls_importance_len(h: *const FlsImportance) -> usize {
    h.as_ref().map_or(0, |h| h.0.len())
}

/// # Safety
/// `h` must be null or a handle from `fls_importance_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fls_importance_free(h: *mut FlsImportance) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Creates a budgeted scheme; clustered uses the water-filled matrix.
/// `kind` is an `FlsSchemeKind` value; optimal sampling needs
/// [`fls_scheme_new_optimal`].
///
/// # Safety
/// `importance` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fls_scheme_new(
    kind: u32,
    m: usize,
    importance: *const FlsImportance,
    out: *mut *mut FlsScheme,
) -> FlsStatus {
    guard(|| {
        let p = handle(importance, "importance")?;
        let kind = scheme_kind(kind).ok_or_else(|| Fail(FlsStatus::InvalidScheme, format!("unknown scheme kind {kind}")))?;
        emit(out, FlsScheme(SchemeSpec::with_budget(kind, m, &p.0)?))
    })
}

/// Creates an optimal-sampling scheme with inclusion probabilities `q`.
///
/// # Safety
/// `q` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fls_scheme_new_optimal(q: *const f64, n: usize, out: *mut *mut FlsScheme) -> FlsStatus {
    guard(|| {
        let q = slice(q, n, "q")?;
        if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Fail(FlsStatus::InvalidScheme, format!("q[{i}] = {v} is outside (0, 1]")));
        }
        emit(out, FlsScheme(SchemeSpec::Optimal { q: q.to_vec() }))
    })
}

/// # Safety
/// `h` must be null or a handle from `fls_scheme_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fls_scheme_free(h: *mut FlsScheme) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

unsafe fn checked<'a>(
    scheme: *const FlsScheme,
    importance: *const FlsImportance,
) -> Result<(&'a SchemeSpec, &'a ClientImportance), Fail> {
    let s = handle(scheme, "scheme")?;
    let p = handle(importance, "importance")?;
    s.0.validate(&p.0)?;
    Ok((&s.0, &p.0))
}

unsafe fn out_slice<'a>(data: *mut f64, len: usize, n: usize) -> Result<Option<&'a mut [f64]>, Fail> {
    if data.is_null() {
        return Ok(None);
    }
    if len != n {
        return Err(Fail(FlsStatus::LengthMismatch, format!("buffer has {len} slots, expected {n}")));
    }
    Ok(Some(std::slice::from_raw_parts_mut(data, len)))
}

/// Closed-form statistics. `var_weight` may be null; otherwise it must
/// hold `len == n` doubles and receives `Var[ω_i]`.
///
/// # Safety
/// Handles must be live; `out` must be writable; `var_weight` as above.
#[no_mangle]
pub unsafe extern "C" fn fls_closed_form_stats(
    scheme: *const FlsScheme,
    importance: *const FlsImportance,
    out: *mut FlsStats,
    var_weight: *mut f64,
    len: usize,
) -> FlsStatus {
    guard(|| {
        let (s, p) = checked(scheme, importance)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let buf = out_slice(var_weight, len, p.len())?;
        let st = closed_form_stats(s, p)?;
        *out = FlsStats {
            alpha: st.alpha,
            alpha_exact: st.alpha_exact,
            var_weight_sum: st.var_weight_sum,
            sigma: st.sigma_q,
            gamma: st.gamma_q,
            expected_clients: st.expected_clients,
            var_clients: st.var_clients.unwrap_or(f64::NAN),
            has_var_clients: st.var_clients.is_some(),
        };
        if let Some(buf) = buf {
            buf.copy_from_slice(&st.var_weight);
        }
        Ok(())
    })
}

/// Draws one weight realization from a stream seeded by `seed`.
/// `omega` must hold `len == n` doubles; `participants` may be null.
///
/// # Safety
/// Handles must be live; buffers as described.
#[no_mangle]
pub unsafe extern "C" fn fls_draw(
    scheme: *const FlsScheme,
    importance: *const FlsImportance,
    seed: u64,
    omega: *mut f64,
    len: usize,
    participants: *mut usize,
) -> FlsStatus {
    guard(|| {
        let (s, p) = checked(scheme, importance)?;
        let buf = out_slice(omega, len, p.len())?.ok_or_else(|| null("omega"))?;
        let mut rng = stream(seed, &[tag::SAMPLING]);
        let w = draw(s, p, &mut rng)?;
        buf.copy_from_slice(w.omega());
        if let Some(n) = participants.as_mut() {
            *n = w.participants_count();
        }
        Ok(())
    })
}

/// Uniform-vs-MD comparison at budget `m`.
///
/// # Safety
/// `importance` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fls_corollary_compare(importance: *const FlsImportance, m: usize, out: *mut FlsVerdict) -> FlsStatus {
    guard(|| {
        let p = handle(importance, "importance")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let v = corollary_compare(&p.0, m)?;
        *out = FlsVerdict { uniform_better: v.uniform_better, threshold: v.threshold, sum_p_sq: v.sum_p_sq, degenerate: v.degenerate };
        Ok(())
    })
}

/// Message of the last failure on this thread; empty after a success.
/// Valid until the next `fls_*` call on the same thread.
#[no_mangle]
pub extern "C" fn fls_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fls_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

