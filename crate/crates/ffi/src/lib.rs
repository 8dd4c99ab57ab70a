//! C interface to the gas bound analyzer.
//!
//! Handles are opaque. Every call returns a [`GbStatus`]; on failure a
//! message is kept per thread and can be read with
//! [`gb_last_error_message`]. Strings handed out by the library must be
//! released with [`gb_string_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::time::Duration;

use gasbound::analysis::{analyze_code, outcome_class, report_json, ContractReport, Options};
use gasbound::bound::BoundExpr;
use gasbound::crs::CVar;
use gasbound::evm::parse_hex;
use gasbound::gas::mem_cost;
use gasbound::linear::Rat;
use gasbound::solver::AnalysisOutcome;
use num_traits::ToPrimitive;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InvalidUtf8 = 3,
    OutOfRange = 4,
    Internal = 5,
}

/// Analysis settings.
pub struct GbAnalyzer {
    options: Options,
}

/// Result of analyzing one contract.
pub struct GbReport {
    report: ContractReport,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

fn fail(status: GbStatus, msg: impl Into<String>) -> GbStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> GbStatus) -> GbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == GbStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(GbStatus::Internal, "internal error"),
    }
}

fn give_string(s: String, out: *mut *mut c_char) -> GbStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            GbStatus::Ok
        }
        Err(_) => fail(GbStatus::Internal, "string contains NUL"),
    }
}

/// Message for the last failed call on this thread; empty after a
/// successful one. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static.
#[no_mangle]
pub extern "C" fn gb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// New analyzer with the default schedule and a 60 s timeout. Free with
/// [`gb_analyzer_free`].
#[no_mangle]
pub extern "C" fn gb_analyzer_new() -> *mut GbAnalyzer {
    Box::into_raw(Box::new(GbAnalyzer { options: Options::default() }))
}

/// # Safety
/// `a` must come from [`gb_analyzer_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gb_analyzer_free(a: *mut GbAnalyzer) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// Timeout per function and per bound, in seconds.
///
/// # Safety
/// `a` must be a live analyzer.
#[no_mangle]
pub unsafe extern "C" fn gb_analyzer_set_timeout(a: *mut GbAnalyzer, seconds: u64) -> GbStatus {
    guard(|| {
        let Some(a) = a.as_mut() else { return fail(GbStatus::NullPointer, "analyzer is null") };
        if seconds == 0 {
            return fail(GbStatus::OutOfRange, "timeout must be positive");
        }
        a.options.timeout = Duration::from_secs(seconds);
        GbStatus::Ok
    })
}

unsafe fn analyze(a: *const GbAnalyzer, code: &[u8], out: *mut *mut GbReport) -> GbStatus {
    let a = &*a;
    let report = analyze_code("<memory>", code, &BTreeMap::new(), &a.options);
    *out = Box::into_raw(Box::new(GbReport { report }));
    GbStatus::Ok
}

/// Analyzes hex bytecode (an optional `0x` prefix and whitespace are
/// allowed). On success `*out` holds a report to free with
/// [`gb_report_free`].
///
/// # Safety
/// `a` must be a live analyzer, `hex` a NUL-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gb_analyze_hex(a: *const GbAnalyzer, hex: *const c_char, out: *mut *mut GbReport) -> GbStatus {
    guard(|| {
        if a.is_null() || hex.is_null() || out.is_null() {
            return fail(GbStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let Ok(text) = CStr::from_ptr(hex).to_str() else { return fail(GbStatus::InvalidUtf8, "hex is not UTF-8") };
        match parse_hex(text) {
            Ok(code) => analyze(a, &code, out),
            Err(e) => fail(GbStatus::InvalidInput, format!("bad hex: {e}")),
        }
    })
}

/// Analyzes raw bytecode.
///
/// # Safety
/// `data` must point to `len` readable bytes (or be null with `len` 0).
#[no_mangle]
pub unsafe extern "C" fn gb_analyze_bytes(
    a: *const GbAnalyzer,
    data: *const u8,
    len: usize,
    out: *mut *mut GbReport,
) -> GbStatus {
    guard(|| {
        if a.is_null() || out.is_null() || (data.is_null() && len > 0) {
            return fail(GbStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let code = if len == 0 { &[][..] } else { std::slice::from_raw_parts(data, len) };
        analyze(a, code, out)
    })
}

/// # Safety
/// `r` must come from an analyze call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gb_report_free(r: *mut GbReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

unsafe fn function<'a>(r: *const GbReport, i: usize) -> Result<&'a gasbound::analysis::FunctionReport, GbStatus> {
    let r = r.as_ref().ok_or_else(|| fail(GbStatus::NullPointer, "report is null"))?;
    r.report.functions.get(i).ok_or_else(|| fail(GbStatus::OutOfRange, format!("no function {i}")))
}

fn outcome(f: &gasbound::analysis::FunctionReport, memory: bool) -> &AnalysisOutcome {
    if memory {
        &f.memory
    } else {
        &f.opcode
    }
}

/// # Safety
/// `r` must be a live report and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gb_report_function_count(r: *const GbReport, out: *mut usize) -> GbStatus {
    guard(|| {
        let (Some(r), false) = (r.as_ref(), out.is_null()) else { return fail(GbStatus::NullPointer, "null argument") };
        *out = r.report.functions.len();
        GbStatus::Ok
    })
}

/// Whether every function got both bounds.
///
/// # Safety
/// `r` must be a live report and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gb_report_all_bounded(r: *const GbReport, out: *mut bool) -> GbStatus {
    guard(|| {
        let (Some(r), false) = (r.as_ref(), out.is_null()) else { return fail(GbStatus::NullPointer, "null argument") };
        *out = r.report.all_bounded();
        GbStatus::Ok
    })
}

/// Function label: `0x` + selector, `fallback` or `contract`.
///
/// # Safety
/// `r` must be a live report and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gb_report_function_label(r: *const GbReport, i: usize, out: *mut *mut c_char) -> GbStatus {
    guard(|| {
        if out.is_null() {
            return fail(GbStatus::NullPointer, "out is null");
        }
        match function(r, i) {
            Ok(f) => give_string(f.label.clone(), out),
            Err(s) => s,
        }
    })
}

/// Outcome class of the opcode (`memory` false) or memory bound, such as
/// `constant`, `parametric` or `termination_unknown`.
///
/// # Safety
/// `r` must be a live report and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gb_report_outcome_class(
    r: *const GbReport,
    i: usize,
    memory: bool,
    out: *mut *mut c_char,
) -> GbStatus {
    guard(|| {
        if out.is_null() {
            return fail(GbStatus::NullPointer, "out is null");
        }
        match function(r, i) {
            Ok(f) => give_string(outcome_class(outcome(f, memory)).to_string(), out),
            Err(s) => s,
        }
    })
}

/// The bound rendered as text, or a description of why there is none.
///
/// # Safety
/// `r` must be a live report and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gb_report_bound_text(
    r: *const GbReport,
    i: usize,
    memory: bool,
    out: *mut *mut c_char,
) -> GbStatus {
    guard(|| {
        if out.is_null() {
            return fail(GbStatus::NullPointer, "out is null");
        }
        match function(r, i) {
            Ok(f) => give_string(outcome(f, memory).to_string(), out),
            Err(s) => s,
        }
    })
}

/// Evaluates a bound with parameters `names[k] = values[k]`; missing
/// parameters are 0. The result is rounded up. Fails with
/// `InvalidInput` when the function has no bound and `OutOfRange` when
/// the value does not fit.
///
/// # Safety
/// `names` and `values` must each hold `n` entries (or be null with `n`
/// 0); each name is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gb_report_eval_bound(
    r: *const GbReport,
    i: usize,
    memory: bool,
    names: *const *const c_char,
    values: *const u64,
    n: usize,
    out: *mut u64,
) -> GbStatus {
    guard(|| {
        if out.is_null() || (n > 0 && (names.is_null() || values.is_null())) {
            return fail(GbStatus::NullPointer, "null argument");
        }
        let f = match function(r, i) {
            Ok(f) => f,
            Err(s) => return s,
        };
        let Some(b) = outcome(f, memory).bound() else {
            return fail(GbStatus::InvalidInput, format!("function {i} has no bound"));
        };
        let mut env: BTreeMap<String, Rat> = BTreeMap::new();
        for k in 0..n {
            let p = *names.add(k);
            if p.is_null() {
                return fail(GbStatus::NullPointer, "null name");
            }
            let Ok(name) = CStr::from_ptr(p).to_str() else { return fail(GbStatus::InvalidUtf8, "name is not UTF-8") };
            env.insert(name.to_string(), Rat::from_integer((*values.add(k)).into()));
        }
        match eval(b, &env).and_then(|v| v.ceil().to_integer().to_u64()) {
            Some(v) => {
                *out = v;
                GbStatus::Ok
            }
            None => fail(GbStatus::OutOfRange, "value does not fit in 64 bits"),
        }
    })
}

fn eval(b: &BoundExpr<CVar>, env: &BTreeMap<String, Rat>) -> Option<Rat> {
    b.eval(&mut |v: &CVar| env.get(&v.name).cloned().unwrap_or_default())
}

/// The report as a JSON document with timings zeroed.
///
/// # Safety
/// `r` must be a live report and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gb_report_json(r: *const GbReport, out: *mut *mut c_char) -> GbStatus {
    guard(|| {
        let (Some(r), false) = (r.as_ref(), out.is_null()) else { return fail(GbStatus::NullPointer, "null argument") };
        give_string(report_json(std::slice::from_ref(&r.report), false).to_string(), out)
    })
}

/// # Safety
/// `s` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn gb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Memory expansion cost of `words` active words.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gb_mem_cost(words: u64, out: *mut u64) -> GbStatus {
    guard(|| {
        if out.is_null() {
            return fail(GbStatus::NullPointer, "out is null");
        }
        match u64::try_from(mem_cost(words)) {
            Ok(v) => {
                *out = v;
                GbStatus::Ok
            }
            Err(_) => fail(GbStatus::OutOfRange, "cost does not fit in 64 bits"),
        }
    })
}
