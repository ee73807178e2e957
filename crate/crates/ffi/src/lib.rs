//! C ABI over the system definition model, the experiment state table and
//! score aggregation.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Strings returned through `char **`
//! out-parameters must be released with [`sunrise_string_free`]. Every
//! fallible call returns a [`SunriseStatus`]; on failure
//! [`sunrise_last_error`] describes the problem for the calling thread.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sunrise_core::bench::{aggregate_score, ScoreError};
use sunrise_core::experiment::{self, Event, ExperimentState};
use sunrise_core::sysdef::{self, ParamKind, ParamValue, Phase, SysCfg, SysDef, SysdefError};

/// Parsed system definition.
pub struct SunriseSysDef(SysDef);

/// Concrete parameter assignment.
pub struct SunriseSysCfg(SysCfg);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SunriseStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Syntax = 3,
    Schema = 4,
    UnknownParameter = 5,
    KindMismatch = 6,
    FileParamInlineValue = 7,
    MissingUpload = 8,
    SystemMismatch = 9,
    InvalidArgument = 10,
    IllegalTransition = 11,
    EmptyInput = 12,
    NonPositive = 13,
    Panic = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SunriseState {
    Created = 0,
    Building = 1,
    Built = 2,
    BuildFailed = 3,
    Running = 4,
    Completed = 5,
    RunFailed = 6,
    Archived = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SunriseEvent {
    BuildRequested = 0,
    BuildSucceeded = 1,
    BuildFailed = 2,
    RunRequested = 3,
    RunSucceeded = 4,
    RunFailed = 5,
    BuildParamsChanged = 6,
    RunParamsChanged = 7,
    ArchiveRequested = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SunrisePhase {
    Build = 0,
    Run = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SunriseParamKind {
    Text = 0,
    Number = 1,
    Flag = 2,
    File = 3,
}

impl From<ExperimentState> for SunriseState {
    fn from(s: ExperimentState) -> Self {
        match s {
            ExperimentState::Created => SunriseState::Created,
            ExperimentState::Building => SunriseState::Building,
            ExperimentState::Built => SunriseState::Built,
            ExperimentState::BuildFailed => SunriseState::BuildFailed,
            ExperimentState::Running => SunriseState::Running,
            ExperimentState::Completed => SunriseState::Completed,
            ExperimentState::RunFailed => SunriseState::RunFailed,
            ExperimentState::Archived => SunriseState::Archived,
        }
    }
}

impl From<SunriseState> for ExperimentState {
    fn from(s: SunriseState) -> Self {
        ExperimentState::ALL[s as usize]
    }
}

impl From<SunriseEvent> for Event {
    fn from(e: SunriseEvent) -> Self {
        Event::ALL[e as usize]
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

struct Failure(SunriseStatus, String);

impl From<SysdefError> for Failure {
    fn from(e: SysdefError) -> Self {
        let status = match &e {
            SysdefError::Syntax(_) => SunriseStatus::Syntax,
            SysdefError::Schema(_) => SunriseStatus::Schema,
            SysdefError::UnknownParameter(_) => SunriseStatus::UnknownParameter,
            SysdefError::KindMismatch { .. } => SunriseStatus::KindMismatch,
            SysdefError::FileParamInlineValue(_) => SunriseStatus::FileParamInlineValue,
            SysdefError::MissingUpload(_) => SunriseStatus::MissingUpload,
            SysdefError::SystemMismatch { .. } => SunriseStatus::SystemMismatch,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SunriseStatus::NullArgument, format!("`{what}` is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SunriseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SunriseStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            SunriseStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SunriseStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(SunriseStatus::InvalidArgument, "output contains NUL".into()))?;
    write_out(out, c.into_raw(), "out")
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn parse_json_object(text: &str, what: &str) -> Result<serde_json::Map<String, serde_json::Value>, Failure> {
    match serde_json::from_str::<serde_json::Value>(text) {
        Ok(serde_json::Value::Object(m)) => Ok(m),
        Ok(_) => Err(Failure(SunriseStatus::Schema, format!("`{what}` must be a JSON object"))),
        Err(e) => Err(Failure(SunriseStatus::Syntax, format!("`{what}`: {e}"))),
    }
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sunrise_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, lowercase name of a status code.
#[no_mangle]
pub extern "C" fn sunrise_status_name(status: SunriseStatus) -> *const c_char {
    let s: &'static CStr = match status {
        SunriseStatus::Ok => c"ok",
        SunriseStatus::NullArgument => c"null_argument",
        SunriseStatus::InvalidUtf8 => c"invalid_utf8",
        SunriseStatus::Syntax => c"syntax",
        SunriseStatus::Schema => c"schema",
        SunriseStatus::UnknownParameter => c"unknown_parameter",
        SunriseStatus::KindMismatch => c"kind_mismatch",
        SunriseStatus::FileParamInlineValue => c"file_param_inline_value",
        SunriseStatus::MissingUpload => c"missing_upload",
        SunriseStatus::SystemMismatch => c"system_mismatch",
        SunriseStatus::InvalidArgument => c"invalid_argument",
        SunriseStatus::IllegalTransition => c"illegal_transition",
        SunriseStatus::EmptyInput => c"empty_input",
        SunriseStatus::NonPositive => c"non_positive",
        SunriseStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sunrise_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a SysDef document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sunrise_sysdef_parse(json: *const c_char, out: *mut *mut SunriseSysDef) -> SunriseStatus {
    guard(|| {
        let text = read_str(json, "json")?;
        let def = sysdef::parse_sysdef(text)?;
        write_out(out, Box::into_raw(Box::new(SunriseSysDef(def))), "out")
    })
}

/// # Safety
/// `def` must come from [`sunrise_sysdef_parse`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sunrise_sysdef_free(def: *mut SunriseSysDef) {
    if !def.is_null() {
        drop(Box::from_raw(def));
    }
}

/// Canonical JSON text of the definition.
///
/// # Safety
/// `def` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sunrise_sysdef_to_json(def: *const SunriseSysDef, out: *mut *mut c_char) -> SunriseStatus {
    guard(|| write_string(out, handle(def, "def")?.0.to_canonical_string()))
}

/// Checks the definition's invariants. `*out` receives a JSON array of
/// `{"field", "rule"}` objects, empty when the definition is valid.
///
/// # Safety
/// `def` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sunrise_sysdef_validate(def: *const SunriseSysDef, out: *mut *mut c_char) -> SunriseStatus {
    guard(|| {
        let violations = sysdef::validate_sysdef(&handle(def, "def")?.0);
        write_string(out, serde_json::to_string(&violations).expect("serializable"))
    })
}

/// Phase and kind of a declared parameter.
///
/// # Safety
/// `def` must be a live handle; `name` NUL-terminated; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn sunrise_sysdef_classify(
    def: *const SunriseSysDef,
    name: *const c_char,
    phase: *mut SunrisePhase,
    kind: *mut SunriseParamKind,
) -> SunriseStatus {
    guard(|| {
        let class = handle(def, "def")?.0.classify_param(read_str(name, "name")?)?;
        let p = match class.phase {
            Phase::Build => SunrisePhase::Build,
            Phase::Run => SunrisePhase::Run,
        };
        let k = match class.kind {
            ParamKind::Text => SunriseParamKind::Text,
            ParamKind::Number => SunriseParamKind::Number,
            ParamKind::Flag => SunriseParamKind::Flag,
            ParamKind::File => SunriseParamKind::File,
        };
        write_out(phase, p, "phase")?;
        write_out(kind, k, "kind")
    })
}

/// Default configuration of a definition.
///
/// # Safety
/// `def` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sunrise_syscfg_derive(def: *const SunriseSysDef, out: *mut *mut SunriseSysCfg) -> SunriseStatus {
    guard(|| {
        let cfg = sysdef::derive_syscfg(&handle(def, "def")?.0);
        write_out(out, Box::into_raw(Box::new(SunriseSysCfg(cfg))), "out")
    })
}

/// Parses a SysCfg document.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sunrise_syscfg_parse(json: *const c_char, out: *mut *mut SunriseSysCfg) -> SunriseStatus {
    guard(|| {
        let text = read_str(json, "json")?;
        let cfg: SysCfg = serde_json::from_str(text).map_err(|e| {
            let status = if e.is_data() { SunriseStatus::Schema } else { SunriseStatus::Syntax };
            Failure(status, e.to_string())
        })?;
        write_out(out, Box::into_raw(Box::new(SunriseSysCfg(cfg))), "out")
    })
}

/// # Safety
/// `cfg` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sunrise_syscfg_free(cfg: *mut SunriseSysCfg) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Canonical JSON text of the configuration.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sunrise_syscfg_to_json(cfg: *const SunriseSysCfg, out: *mut *mut c_char) -> SunriseStatus {
    guard(|| write_string(out, handle(cfg, "cfg")?.0.to_canonical_string()))
}

/// Lists disagreements between `cfg` and `def` as a JSON array.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sunrise_syscfg_check(
    cfg: *const SunriseSysCfg,
    def: *const SunriseSysDef,
    out: *mut *mut c_char,
) -> SunriseStatus {
    guard(|| {
        let issues = handle(cfg, "cfg")?.0.check_against(&handle(def, "def")?.0);
        write_string(out, serde_json::to_string(&issues).expect("serializable"))
    })
}

/// Applies a flat JSON object of overrides, all or nothing. The input
/// handle is left untouched; `*out` receives a new configuration.
///
/// # Safety
/// Handles must be live; `overrides_json` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sunrise_syscfg_apply_overrides(
    cfg: *const SunriseSysCfg,
    def: *const SunriseSysDef,
    overrides_json: *const c_char,
    out: *mut *mut SunriseSysCfg,
) -> SunriseStatus {
    guard(|| {
        let (cfg, def) = (handle(cfg, "cfg")?, handle(def, "def")?);
        let raw = parse_json_object(read_str(overrides_json, "overrides_json")?, "overrides_json")?;
        let mut overrides = BTreeMap::new();
        for (k, v) in raw {
            let value = ParamValue::from_json(&v)
                .map_err(|m| Failure(SunriseStatus::Schema, format!("parameter `{k}`: {m}")))?;
            overrides.insert(k, value);
        }
        let next = sysdef::apply_overrides(&cfg.0, &def.0, &overrides)?;
        write_out(out, Box::into_raw(Box::new(SunriseSysCfg(next))), "out")
    })
}

/// Renders `syscfg.json` with file parameters rewritten to the paths in
/// `staged_json`, a JSON object of parameter name to workspace path.
///
/// # Safety
/// `cfg` must be live; `staged_json` NUL-terminated or NULL for none;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sunrise_syscfg_materialize(
    cfg: *const SunriseSysCfg,
    staged_json: *const c_char,
    out: *mut *mut c_char,
) -> SunriseStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let mut staged = BTreeMap::new();
        if !staged_json.is_null() {
            for (k, v) in parse_json_object(read_str(staged_json, "staged_json")?, "staged_json")? {
                let path = v
                    .as_str()
                    .ok_or_else(|| Failure(SunriseStatus::Schema, format!("staged path for `{k}` must be a string")))?;
                staged.insert(k, path.to_string());
            }
        }
        write_string(out, sysdef::materialize_syscfg(&cfg.0, &staged)?)
    })
}

/// Looks up the state table. Illegal pairs return
/// `SUNRISE_STATUS_ILLEGAL_TRANSITION` and leave `*next` unchanged.
///
/// # Safety
/// `next` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sunrise_transition(
    state: SunriseState,
    event: SunriseEvent,
    next: *mut SunriseState,
) -> SunriseStatus {
    guard(|| match experiment::transition(state.into(), event.into()) {
        Ok(s) => write_out(next, s.into(), "next"),
        Err(e) => Err(Failure(SunriseStatus::IllegalTransition, e.to_string())),
    })
}

/// Geometric mean of `len` positive finite metrics.
///
/// # Safety
/// `metrics` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sunrise_aggregate_score(metrics: *const f64, len: usize, out: *mut f64) -> SunriseStatus {
    guard(|| {
        let slice: &[f64] = if len == 0 {
            &[]
        } else if metrics.is_null() {
            return Err(null("metrics"));
        } else {
            std::slice::from_raw_parts(metrics, len)
        };
        let score = aggregate_score(slice).map_err(|e| {
            let status = match e {
                ScoreError::EmptyMetrics => SunriseStatus::EmptyInput,
                ScoreError::NonPositiveMetric(_) => SunriseStatus::NonPositive,
            };
            Failure(status, e.to_string())
        })?;
        write_out(out, score, "out")
    })
}
