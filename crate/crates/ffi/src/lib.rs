//! C ABI over the teechain simulator.
//!
//! Scenario runs are returned as opaque `TcRun` handles owned by the caller
//! and released with `tc_run_free`. Every fallible call returns a `TcStatus`;
//! the message of the last failure on the calling thread is available from
//! `tc_last_error`. Strings returned by a handle live as long as the handle.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

use teechain::harness::{cost_formulas, run, CostError, Params, Scenario, Scheme, SimError};

/// Status codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ScenarioInvalid = 3,
    OracleDivergence = 4,
    Protocol = 5,
    ParamOutOfRange = 6,
    UnknownScheme = 7,
    IndexOutOfRange = 8,
}

/// Result of one scenario run.
pub struct TcRun {
    passed: bool,
    events: CString,
    ledger: CString,
    cost_csv: CString,
    users: Vec<TcUserOutcome>,
    // Backs the `name` pointers in `users`.
    _names: Vec<CString>,
}

/// Final balances of one user. `name` is owned by the run handle.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TcUserOutcome {
    pub name: *const c_char,
    pub honest: bool,
    pub ledger: u64,
    pub ideal: u64,
    pub perceived: i64,
}

/// An exact rational `num / den` with `den > 0`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TcRational {
    pub num: i64,
    pub den: i64,
}

/// Per-channel transactions and cost of a bilateral and a unilateral close.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TcCostRow {
    pub bilateral_txs: TcRational,
    pub bilateral_cost: TcRational,
    pub unilateral_txs: TcRational,
    pub unilateral_cost: TcRational,
}

/// Formula parameters; see `tc_cost_params_default`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TcCostParams {
    pub d: i64,
    pub i: i64,
    pub p: i64,
    pub n: i64,
    pub n1: i64,
    pub n2: i64,
    pub m1: i64,
    pub m2: i64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: TcStatus, msg: impl Into<String>) -> TcStatus {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
    status
}

fn sim_status(e: &SimError) -> TcStatus {
    match e {
        SimError::ScenarioInvalid(_) => TcStatus::ScenarioInvalid,
        SimError::OracleDivergence(_) => TcStatus::OracleDivergence,
        _ => TcStatus::Protocol,
    }
}

fn c_string(s: &str) -> CString {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed")
}

/// # Safety
/// `p` is null or a valid nul-terminated string.
unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, TcStatus> {
    if p.is_null() {
        return Err(fail(TcStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|e| fail(TcStatus::InvalidUtf8, e.to_string()))
}

/// Message of the last failure on this thread, or an empty string. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Runs a JSON scenario. On success `*out` receives a handle even when the
/// differential check failed; query it with `tc_run_passed`.
///
/// # Safety
/// `scenario_json` is a valid nul-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tc_run_scenario(scenario_json: *const c_char, out: *mut *mut TcRun) -> TcStatus {
    if out.is_null() {
        return fail(TcStatus::NullPointer, "null output handle");
    }
    *out = ptr::null_mut();
    let text = match read_str(scenario_json) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let output = match Scenario::from_json(text).and_then(|s| run(&s)) {
        Ok(o) => o,
        Err(e) => return fail(sim_status(&e), e.to_string()),
    };
    let names: Vec<CString> = output.verdict.users.iter().map(|u| c_string(&u.name)).collect();
    let users = output
        .verdict
        .users
        .iter()
        .zip(&names)
        .map(|(u, n)| TcUserOutcome {
            name: n.as_ptr(),
            honest: u.honest,
            ledger: u.ledger,
            ideal: u.ideal,
            perceived: u.perceived.clamp(i64::MIN as i128, i64::MAX as i128) as i64,
        })
        .collect();
    let handle = TcRun {
        passed: output.check().is_ok(),
        events: c_string(&output.events),
        ledger: c_string(&output.ledger),
        cost_csv: c_string(&output.cost.to_csv()),
        users,
        _names: names,
    };
    *out = Box::into_raw(Box::new(handle));
    TcStatus::Ok
}

/// Releases a run handle. Null is ignored.
///
/// # Safety
/// `run` is null or a handle from `tc_run_scenario` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tc_run_free(run: *mut TcRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Whether every honest user ended with at least what the oracle owed it.
///
/// # Safety
/// `run` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tc_run_passed(run: *const TcRun) -> bool {
    run.as_ref().is_some_and(|r| r.passed)
}

/// Event trace as JSON lines, or null for a null handle.
///
/// # Safety
/// `run` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tc_run_events(run: *const TcRun) -> *const c_char {
    run.as_ref().map_or(ptr::null(), |r| r.events.as_ptr())
}

/// Ledger confirmations as JSON lines, or null for a null handle.
///
/// # Safety
/// `run` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tc_run_ledger(run: *const TcRun) -> *const c_char {
    run.as_ref().map_or(ptr::null(), |r| r.ledger.as_ptr())
}

/// Per-channel cost report as CSV, or null for a null handle.
///
/// # Safety
/// `run` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tc_run_cost_csv(run: *const TcRun) -> *const c_char {
    run.as_ref().map_or(ptr::null(), |r| r.cost_csv.as_ptr())
}

/// Number of users in the run, or zero for a null handle.
///
/// # Safety
/// `run` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tc_run_user_count(run: *const TcRun) -> usize {
    run.as_ref().map_or(0, |r| r.users.len())
}

/// Copies the outcome of user `index` into `*out`.
///
/// # Safety
/// `run` is null or a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tc_run_user(run: *const TcRun, index: usize, out: *mut TcUserOutcome) -> TcStatus {
    let (Some(r), false) = (run.as_ref(), out.is_null()) else {
        return fail(TcStatus::NullPointer, "null handle or output");
    };
    match r.users.get(index) {
        Some(u) => {
            *out = *u;
            TcStatus::Ok
        }
        None => fail(TcStatus::IndexOutOfRange, format!("user index {index} of {}", r.users.len())),
    }
}

#[no_mangle]
pub extern "C" fn tc_cost_params_default() -> TcCostParams {
    let p = Params::default();
    TcCostParams { d: p.d, i: p.i, p: p.p, n: p.n, n1: p.n1, n2: p.n2, m1: p.m1, m2: p.m2 }
}

/// Evaluates the closed-form cost row of `scheme` ("ln", "dmc", "sfmc" or
/// "teechain") at `params`.
///
/// # Safety
/// `scheme` is a valid nul-terminated string; `params` is readable and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tc_cost_formula(scheme: *const c_char, params: *const TcCostParams, out: *mut TcCostRow) -> TcStatus {
    let name = match read_str(scheme) {
        Ok(s) => s,
        Err(s) => return s,
    };
    let (Some(p), false) = (params.as_ref(), out.is_null()) else {
        return fail(TcStatus::NullPointer, "null params or output");
    };
    let scheme: Scheme = match name.parse() {
        Ok(s) => s,
        Err(e) => return fail(TcStatus::UnknownScheme, format!("{e}")),
    };
    let params = Params { d: p.d, i: p.i, p: p.p, n: p.n, n1: p.n1, n2: p.n2, m1: p.m1, m2: p.m2 };
    match cost_formulas(scheme, &params) {
        Ok(row) => {
            let q = |r: num_rational::Rational64| TcRational { num: *r.numer(), den: *r.denom() };
            *out = TcCostRow {
                bilateral_txs: q(row.bilateral.txs),
                bilateral_cost: q(row.bilateral.cost),
                unilateral_txs: q(row.unilateral.txs),
                unilateral_cost: q(row.unilateral.cost),
            };
            TcStatus::Ok
        }
        Err(e @ CostError::ParamOutOfRange { .. }) => fail(TcStatus::ParamOutOfRange, e.to_string()),
        Err(e @ CostError::UnknownScheme(_)) => fail(TcStatus::UnknownScheme, e.to_string()),
    }
}
