//! C interface to `pubsel`.
//!
//! Objects are opaque handles created by `pubsel_*_new` style functions and
//! released with the matching `pubsel_*_free`. Every fallible function
//! returns a [`PubselStatus`]; on failure the message is available from
//! [`pubsel_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pubsel::cli::FitDocument;
use pubsel::correct::{bonferroni_interval, corrected_interval, truncated_cdf, CorrectedInference};
use pubsel::estimate::ModelFit;
use pubsel::simulate::replication_probability;
use pubsel::{EffectDistribution, Error, SelectionFunction};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PubselStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Arguments or data were invalid.
    InvalidInput = 2,
    /// A numerical routine failed.
    Numerical = 3,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 4,
    /// Internal panic; the library state is unaffected.
    Panic = 5,
}

/// Selection function p(z).
pub struct PubselSelection(SelectionFunction);

/// Distribution of true effects.
pub struct PubselEffect(EffectDistribution);

/// Fitted model read from a fit document.
pub struct PubselFit {
    fit: ModelFit,
    names: Vec<CString>,
}

/// Median-unbiased estimate with interval bounds.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PubselInterval {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Utf8,
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PubselStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PubselStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            PubselStatus::NullPointer
        }
        Ok(Err(Failure::Utf8)) => {
            set_error("string argument is not valid UTF-8".into());
            PubselStatus::InvalidUtf8
        }
        Ok(Err(Failure::Lib(e))) => {
            let status = if e.is_input() { PubselStatus::InvalidInput } else { PubselStatus::Numerical };
            set_error(e.to_string());
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PubselStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn interval(c: &CorrectedInference, bonferroni: bool) -> PubselInterval {
    if bonferroni {
        PubselInterval {
            median: c.theta_median,
            lower: c.bonf_lower.unwrap_or(f64::NAN),
            upper: c.bonf_upper.unwrap_or(f64::NAN),
        }
    } else {
        PubselInterval { median: c.theta_median, lower: c.ci_lower, upper: c.ci_upper }
    }
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pubsel_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn pubsel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Step selection function over z with increasing `cutoffs` (on |z| when
/// `symmetric`) and one coefficient per cell. No cell is normalized.
///
/// # Safety
/// Array pointers must be valid for the given lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pubsel_selection_new(
    cutoffs: *const f64,
    n_cutoffs: usize,
    coefficients: *const f64,
    n_coefficients: usize,
    symmetric: bool,
    out_handle: *mut *mut PubselSelection,
) -> PubselStatus {
    guard(|| {
        let o = out(out_handle, "out")?;
        let c = slice(cutoffs, n_cutoffs, "cutoffs")?.to_vec();
        let b = slice(coefficients, n_coefficients, "coefficients")?.to_vec();
        let p = SelectionFunction::unnormalized(c, b, symmetric)?;
        *o = Box::into_raw(Box::new(PubselSelection(p)));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn pubsel_selection_free(handle: *mut PubselSelection) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// p(z).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pubsel_selection_value(p: *const PubselSelection, z: f64, value: *mut f64) -> PubselStatus {
    guard(|| {
        *out(value, "value")? = deref(p, "selection")?.0.value(z);
        Ok(())
    })
}

/// E[p(X/sigma) | theta] for X ~ N(theta, sigma^2).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pubsel_expected_pub_prob(
    p: *const PubselSelection,
    theta: f64,
    sigma: f64,
    value: *mut f64,
) -> PubselStatus {
    guard(|| {
        let p = &deref(p, "selection")?.0;
        let v = out(value, "value")?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Input("sigma must be positive and finite".into()).into());
        }
        *v = p.expected_pub_prob(theta, sigma);
        Ok(())
    })
}

/// CDF of a published estimate at `x` given `theta`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pubsel_truncated_cdf(
    p: *const PubselSelection,
    x: f64,
    theta: f64,
    sigma: f64,
    value: *mut f64,
) -> PubselStatus {
    guard(|| {
        let p = &deref(p, "selection")?.0;
        *out(value, "value")? = truncated_cdf(x, theta, sigma, p)?;
        Ok(())
    })
}

/// Median-unbiased estimate and equal-tailed `1 - alpha` interval under a known p.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pubsel_corrected_interval(
    p: *const PubselSelection,
    x: f64,
    sigma: f64,
    alpha: f64,
    result: *mut PubselInterval,
) -> PubselStatus {
    guard(|| {
        let p = &deref(p, "selection")?.0;
        let r = out(result, "result")?;
        *r = interval(&corrected_interval(x, sigma, p, alpha)?, false);
        Ok(())
    })
}

unsafe fn new_effect(d: pubsel::Result<EffectDistribution>, o: *mut *mut PubselEffect) -> PubselStatus {
    guard(|| {
        let o = out(o, "out")?;
        *o = Box::into_raw(Box::new(PubselEffect(d?)));
        Ok(())
    })
}

/// Symmetric gamma on |theta| with random sign.
///
/// # Safety
/// `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pubsel_effect_gamma_abs(shape: f64, scale: f64, out_handle: *mut *mut PubselEffect) -> PubselStatus {
    new_effect(EffectDistribution::gamma_abs(shape, scale), out_handle)
}

/// # Safety
/// `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pubsel_effect_t(location: f64, scale: f64, df: f64, out_handle: *mut *mut PubselEffect) -> PubselStatus {
    new_effect(EffectDistribution::t_location_scale(location, scale, df), out_handle)
}

/// # Safety
/// `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pubsel_effect_normal(mean: f64, sd: f64, out_handle: *mut *mut PubselEffect) -> PubselStatus {
    new_effect(EffectDistribution::normal(mean, sd), out_handle)
}

/// # Safety
/// `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pubsel_effect_point_mass(value: f64, out_handle: *mut *mut PubselEffect) -> PubselStatus {
    new_effect(EffectDistribution::point_mass(value), out_handle)
}

/// # Safety
/// `handle` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn pubsel_effect_free(handle: *mut PubselEffect) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Probability that a result significant at `zc` replicates with the same sign.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pubsel_replication_probability(mu: *const PubselEffect, zc: f64, value: *mut f64) -> PubselStatus {
    guard(|| {
        let mu = &deref(mu, "effect")?.0;
        *out(value, "value")? = replication_probability(mu, zc)?;
        Ok(())
    })
}

/// Reads a fit document as written by `pubsel fit`.
///
/// # Safety
/// `json` must be a nul-terminated string; `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pubsel_fit_from_json(json: *const c_char, out_handle: *mut *mut PubselFit) -> PubselStatus {
    guard(|| {
        let o = out(out_handle, "out")?;
        if json.is_null() {
            return Err(Failure::Null("json"));
        }
        let s = CStr::from_ptr(json).to_str().map_err(|_| Failure::Utf8)?;
        let doc: FitDocument = serde_json::from_str(s).map_err(Error::from)?;
        let names = doc.fit.param_names.iter().map(|n| CString::new(n.as_str()).expect("parameter name")).collect();
        *o = Box::into_raw(Box::new(PubselFit { fit: doc.fit, names }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn pubsel_fit_free(handle: *mut PubselFit) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of parameters, or 0 for a null handle.
///
/// # Safety
/// `fit` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn pubsel_fit_n_parameters(fit: *const PubselFit) -> usize {
    fit.as_ref().map_or(0, |f| f.names.len())
}

/// Name of parameter `i`, owned by the handle; null when out of range.
///
/// # Safety
/// `fit` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn pubsel_fit_parameter_name(fit: *const PubselFit, i: usize) -> *const c_char {
    fit.as_ref().and_then(|f| f.names.get(i)).map_or(ptr::null(), |c| c.as_ptr())
}

/// Estimate and standard error of parameter `i`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pubsel_fit_parameter(
    fit: *const PubselFit,
    i: usize,
    estimate: *mut f64,
    std_error: *mut f64,
) -> PubselStatus {
    guard(|| {
        let f = &deref(fit, "fit")?.fit;
        let (e, s) = (out(estimate, "estimate")?, out(std_error, "std_error")?);
        let Some(&v) = f.theta_hat.get(i) else {
            return Err(Error::Input(format!("parameter index {i} out of range")).into());
        };
        *e = v;
        *s = f.standard_errors()[i];
        Ok(())
    })
}

/// Whether the optimizer met its convergence criteria.
///
/// # Safety
/// `fit` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn pubsel_fit_converged(fit: *const PubselFit) -> bool {
    fit.as_ref().is_some_and(|f| f.fit.converged)
}

/// Selection function at the estimated coefficients, as a new handle.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pubsel_fit_selection(fit: *const PubselFit, out_handle: *mut *mut PubselSelection) -> PubselStatus {
    guard(|| {
        let f = &deref(fit, "fit")?.fit;
        let o = out(out_handle, "out")?;
        let spec = f.layout.spec(&f.spec, &f.theta_hat)?;
        *o = Box::into_raw(Box::new(PubselSelection(spec.selection)));
        Ok(())
    })
}

/// Interval widened for estimation error in the fitted selection function.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pubsel_bonferroni_interval(
    fit: *const PubselFit,
    x: f64,
    sigma: f64,
    alpha: f64,
    delta: f64,
    result: *mut PubselInterval,
) -> PubselStatus {
    guard(|| {
        let f = &deref(fit, "fit")?.fit;
        let r = out(result, "result")?;
        *r = interval(&bonferroni_interval(x, sigma, f, alpha, delta)?, true);
        Ok(())
    })
}
