//! C interface to the dieroll simulator.
//!
//! Every function returns a [`DrStatus`]; results go through out-pointers.
//! On failure the message is kept per thread and read with
//! [`dr_last_error_message`]. Scenarios are opaque handles created by
//! [`dr_scenario_load`] or [`dr_scenario_parse`] and released with
//! [`dr_scenario_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use dieroll::analysis::{check_security, exact_outcome_distribution, monte_carlo, security_bound, SecurityCheck, Tolerance};
use dieroll::partition::{build_partition, IdealDistribution};
use dieroll::randsource::BitSourceModel;
use dieroll::scenario::{build_scenario, load_scenario, parse_scenario, Overrides, Scenario, ScenarioError};
use dieroll::spacetime::{validate_layout, Ball, Layout};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    ConfigInvalid = 4,
    /// An adversary strategy tried to act on information outside its
    /// causal past.
    Causality = 5,
    /// The analysis could not be carried out, e.g. enumeration too large.
    Analysis = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Loaded scenario. Opaque to C.
pub struct DrScenario {
    inner: Scenario,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: DrStatus, msg: impl Into<String>) -> DrStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> DrStatus) -> DrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(DrStatus::Panic, "internal panic"))
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, DrStatus> {
    if p.is_null() {
        return Err(fail(DrStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(DrStatus::InvalidArgument, "string is not UTF-8"))
}

unsafe fn input<'a, T>(p: *const T, len: usize) -> Result<&'a [T], DrStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(DrStatus::NullPointer, "null input array"));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// Copies `values` into a caller buffer of `cap` elements.
unsafe fn output<T: Copy>(values: &[T], out: *mut T, cap: usize) -> DrStatus {
    if out.is_null() {
        return fail(DrStatus::NullPointer, "null output buffer");
    }
    if cap < values.len() {
        return fail(DrStatus::BufferTooSmall, format!("buffer holds {cap} values, {} needed", values.len()));
    }
    slice::from_raw_parts_mut(out, values.len()).copy_from_slice(values);
    DrStatus::Ok
}

fn scenario_status(e: &ScenarioError) -> DrStatus {
    let status = match e {
        ScenarioError::Io { .. } => DrStatus::Io,
        _ => DrStatus::ConfigInvalid,
    };
    let msg = match e {
        ScenarioError::Invalid(diags) => diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "),
        other => other.to_string(),
    };
    fail(status, msg)
}

unsafe fn handle<'a>(s: *const DrScenario) -> Result<&'a Scenario, DrStatus> {
    s.as_ref().map(|s| &s.inner).ok_or_else(|| fail(DrStatus::NullPointer, "null scenario"))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn dr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a TOML scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dr_scenario_load(path: *const c_char, out: *mut *mut DrScenario) -> DrStatus {
    guard(|| {
        let path = tri!(text(path));
        if out.is_null() {
            return fail(DrStatus::NullPointer, "null out pointer");
        }
        match load_scenario(Path::new(path), Overrides::default()) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DrScenario { inner }));
                DrStatus::Ok
            }
            Err(e) => scenario_status(&e),
        }
    })
}

/// Parses a scenario from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dr_scenario_parse(toml: *const c_char, out: *mut *mut DrScenario) -> DrStatus {
    guard(|| {
        let toml = tri!(text(toml));
        if out.is_null() {
            return fail(DrStatus::NullPointer, "null out pointer");
        }
        let built = parse_scenario(toml).and_then(|f| build_scenario(&f, "scenario", Overrides::default()));
        match built {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DrScenario { inner }));
                DrStatus::Ok
            }
            Err(e) => scenario_status(&e),
        }
    })
}

/// Releases a scenario. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dr_scenario_free(s: *mut DrScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Parties `M`, outcomes `N`, modulus `n` and parallel instances.
///
/// # Safety
/// `s` must be a live handle; each out pointer may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn dr_scenario_shape(
    s: *const DrScenario,
    parties: *mut usize,
    outcomes: *mut usize,
    n: *mut usize,
    instances: *mut usize,
) -> DrStatus {
    guard(|| {
        let s = tri!(handle(s));
        let p = &s.params;
        for (ptr, v) in [(parties, p.parties()), (outcomes, p.outcomes()), (n, p.n()), (instances, s.session.instances().len())] {
            if !ptr.is_null() {
                *ptr = v;
            }
        }
        DrStatus::Ok
    })
}

/// Security parameter `δ`, partition tolerance `α`, and the ideal
/// distribution (`outcomes` values).
///
/// # Safety
/// `s` must be a live handle; `ideal` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn dr_scenario_bound(
    s: *const DrScenario,
    delta: *mut f64,
    alpha: *mut f64,
    ideal: *mut f64,
    cap: usize,
) -> DrStatus {
    guard(|| {
        let s = tri!(handle(s));
        let b = security_bound(&s.params);
        if delta.is_null() || alpha.is_null() {
            return fail(DrStatus::NullPointer, "null out pointer");
        }
        *delta = b.delta;
        *alpha = b.alpha;
        output(s.params.partition().ideal(), ideal, cap)
    })
}

/// Summary of one instance's outcome distribution.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DrVerdict {
    /// Runs (Monte Carlo) that reached an outcome; 0 for exact results.
    pub trials: u64,
    pub abort_rate: f64,
    pub max_deviation: f64,
    pub variational_distance: f64,
    /// 1 if the security bound holds, 0 otherwise.
    pub pass: u8,
}

fn verdict(c: &SecurityCheck, trials: u64, abort_rate: f64) -> DrVerdict {
    DrVerdict {
        trials,
        abort_rate,
        max_deviation: c.max_deviation,
        variational_distance: c.variational_distance,
        pass: u8::from(c.pass),
    }
}

fn analysis_status(e: &dieroll::analysis::AnalysisError) -> DrStatus {
    fail(if e.is_causality() { DrStatus::Causality } else { DrStatus::Analysis }, e.to_string())
}

/// Monte Carlo estimate for one instance. `workers = 0` uses every core;
/// results do not depend on it. `probs` receives the `outcomes` empirical
/// frequencies.
///
/// # Safety
/// `s` must be a live handle; `probs` must hold `cap` doubles and `out` be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dr_monte_carlo(
    s: *const DrScenario,
    instance: usize,
    trials: u64,
    seed: u64,
    workers: usize,
    probs: *mut f64,
    cap: usize,
    out: *mut DrVerdict,
) -> DrStatus {
    guard(|| {
        let s = tri!(handle(s));
        if out.is_null() {
            return fail(DrStatus::NullPointer, "null out pointer");
        }
        if instance >= s.session.instances().len() {
            return fail(DrStatus::InvalidArgument, format!("no instance {instance}"));
        }
        let mc = match monte_carlo(&s.session, trials, seed, (workers > 0).then_some(workers)) {
            Ok(m) => m,
            Err(e) => return analysis_status(&e),
        };
        let st = &mc.instances[instance];
        let bound = security_bound(&s.params);
        let check = if st.trials == 0 {
            SecurityCheck::vacuous(&bound, st.ideal.len())
        } else {
            check_security(&st.empirical, &st.ideal, &bound, Tolerance::Sampled { trials: st.trials })
        };
        *out = verdict(&check, st.trials, st.abort_rate());
        output(&st.empirical, probs, cap)
    })
}

/// Exact outcome distribution of one instance by enumeration, refused with
/// [`DrStatus::Analysis`] beyond `limit` input combinations (0 uses the
/// scenario's limit).
///
/// # Safety
/// As for [`dr_monte_carlo`].
#[no_mangle]
pub unsafe extern "C" fn dr_exact(
    s: *const DrScenario,
    instance: usize,
    limit: u64,
    probs: *mut f64,
    cap: usize,
    out: *mut DrVerdict,
) -> DrStatus {
    guard(|| {
        let s = tri!(handle(s));
        if out.is_null() {
            return fail(DrStatus::NullPointer, "null out pointer");
        }
        if instance >= s.session.instances().len() {
            return fail(DrStatus::InvalidArgument, format!("no instance {instance}"));
        }
        let limit = if limit == 0 { s.enumeration_limit } else { limit };
        let e = match exact_outcome_distribution(&s.session, limit) {
            Ok(e) => e,
            Err(e) => return analysis_status(&e),
        };
        let d = &e.instances[instance];
        let bound = security_bound(&s.params);
        let check = if d.abort_probability >= 1.0 - dieroll::analysis::EXACT_TOLERANCE {
            SecurityCheck::vacuous(&bound, d.ideal.len())
        } else {
            check_security(&d.probs, &d.ideal, &bound, Tolerance::Exact)
        };
        *out = verdict(&check, 0, d.abort_probability);
        output(&d.probs, probs, cap)
    })
}

/// Splits `ℤ_n` into classes for the distribution `probs[0..outcomes]`.
/// Writes the class sizes and the realized tolerance `α`.
///
/// # Safety
/// `probs` must hold `outcomes` doubles, `sizes` `cap` values, `alpha` be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dr_build_partition(
    probs: *const f64,
    outcomes: usize,
    n: usize,
    sizes: *mut usize,
    cap: usize,
    alpha: *mut f64,
) -> DrStatus {
    guard(|| {
        let probs = tri!(input(probs, outcomes));
        if alpha.is_null() {
            return fail(DrStatus::NullPointer, "null out pointer");
        }
        let p = IdealDistribution::new(probs.to_vec()).and_then(|d| build_partition(&d, n));
        match p {
            Ok(p) => {
                *alpha = p.alpha();
                output(p.class_sizes(), sizes, cap)
            }
            Err(e) => fail(DrStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Bias of the XOR of the first `rounds` of `len` independent bits, bit
/// `i` being 0 with probability `1/2 + biases[i]`.
///
/// # Safety
/// `biases` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dr_pile_up(biases: *const f64, len: usize, rounds: usize, out: *mut f64) -> DrStatus {
    guard(|| {
        let biases = tri!(input(biases, len));
        if out.is_null() {
            return fail(DrStatus::NullPointer, "null out pointer");
        }
        match BitSourceModel::new(biases.to_vec()).and_then(|b| b.pile_up(rounds)) {
            Ok(v) => {
                *out = v;
                DrStatus::Ok
            }
            Err(e) => fail(DrStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Checks a layout of `m` balls: `centers` holds `3m` coordinates. Returns
/// [`DrStatus::ConfigInvalid`] listing every violated constraint.
///
/// # Safety
/// Arrays must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn dr_validate_layout(
    centers: *const f64,
    radii: *const f64,
    deadlines: *const f64,
    m: usize,
) -> DrStatus {
    guard(|| {
        let centers = tri!(input(centers, 3 * m));
        let radii = tri!(input(radii, m));
        let deadlines = tri!(input(deadlines, m));
        let balls = centers.chunks(3).zip(radii).map(|(c, &r)| Ball::new([c[0], c[1], c[2]], r)).collect();
        match validate_layout(&Layout::new(balls, deadlines.to_vec())) {
            Ok(()) => DrStatus::Ok,
            Err(v) => fail(
                DrStatus::ConfigInvalid,
                v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
            ),
        }
    })
}
