//! C ABI over the broadcast simulator.
//!
//! A caller hands in an experiment config as a JSON string, gets back an
//! opaque run handle, and reads results out of it as C strings: the summary
//! row as JSON or CSV, and the full wire trace as NDJSON. Every function
//! returns a [`PbStatus`]; on any failure [`pb_last_error_message`] carries
//! a human-readable description for the calling thread.
//!
//! Ownership rules are uniform: handles are released with [`pb_run_free`],
//! strings returned through out-pointers with [`pb_string_free`], and
//! pointers returned directly (version, CSV header) are static and must not
//! be freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;
use std::sync::OnceLock;

use privbcast::cli::{run_trial, CliError, ExperimentConfig, CSV_HEADER};
use privbcast::simnet::{seeded, RngPurpose};

/// Result of every fallible call in this interface.
#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PbStatus {
    /// The call succeeded.
    PB_OK = 0,
    /// A required pointer argument was null.
    PB_NULL_ARG = 1,
    /// An input string was not valid UTF-8.
    PB_UTF8 = 2,
    /// The config string was not valid JSON for an experiment config.
    PB_JSON = 3,
    /// The config parsed but failed validation, or the graph is infeasible.
    PB_CONFIG = 4,
    /// The run itself failed (for example the event budget was exhausted).
    PB_RUNTIME = 5,
}

/// One completed simulation run. Opaque; create with [`pb_run_new`], read
/// with the accessor functions, release with [`pb_run_free`].
pub struct PbRun {
    report_json: CString,
    csv_row: CString,
    trace_ndjson: CString,
    phase_msgs: [u64; 3],
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = Some(CString::new(sanitized).expect("nul stripped"));
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn status_of(err: &CliError) -> PbStatus {
    match err {
        CliError::Config(_) => PbStatus::PB_CONFIG,
        CliError::Runtime(_) => PbStatus::PB_RUNTIME,
    }
}

fn fail(status: PbStatus, msg: &str) -> PbStatus {
    set_error(msg);
    status
}

/// Reads a caller string, reporting null and encoding problems uniformly.
unsafe fn read_utf8<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, PbStatus> {
    if ptr.is_null() {
        return Err(fail(PbStatus::PB_NULL_ARG, &format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(PbStatus::PB_UTF8, &format!("{what} is not valid UTF-8")))
}

fn parse_config(json: &str) -> Result<ExperimentConfig, PbStatus> {
    serde_json::from_str(json)
        .map_err(|e| fail(PbStatus::PB_JSON, &format!("config: {e}")))
}

/// Runs one trial of the config in `config_json` (same JSON schema as the
/// CLI's `--config` file) and stores a new run handle in `*out`. `run_index`
/// offsets the seed exactly like the CLI's run ids, so index `i` here
/// reproduces row `i` of a `simulate` invocation with the same config.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated C string and `out` a valid
/// pointer to writable memory; both must outlive the call. On `PB_OK` the
/// caller owns `*out` and must release it with [`pb_run_free`]. On any other
/// status `*out` is left untouched.
#[no_mangle]
pub unsafe extern "C" fn pb_run_new(
    config_json: *const c_char,
    run_index: u64,
    out: *mut *mut PbRun,
) -> PbStatus {
    if out.is_null() {
        return fail(PbStatus::PB_NULL_ARG, "out is null");
    }
    let json = match read_utf8(config_json, "config_json") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let cfg = match parse_config(json) {
        Ok(cfg) => cfg,
        Err(status) => return status,
    };
    if let Err(e) = cfg.validate() {
        return fail(status_of(&e), e.message());
    }
    let trial = match run_trial(&cfg, run_index, true) {
        Ok(trial) => trial,
        Err(e) => return fail(status_of(&e), e.message()),
    };
    let report_json = serde_json::to_string(&trial.row).expect("row serializes");
    let mut trace_buf = Vec::new();
    trial
        .trace
        .write_ndjson(&trial.meta, &mut trace_buf)
        .expect("writing to a vec cannot fail");
    let trace_ndjson = String::from_utf8(trace_buf).expect("trace is JSON text");
    let run = PbRun {
        report_json: CString::new(report_json).expect("JSON has no nul"),
        csv_row: CString::new(trial.row.csv_line()).expect("CSV has no nul"),
        trace_ndjson: CString::new(trace_ndjson).expect("NDJSON has no nul"),
        phase_msgs: trial.row.phase_msgs,
    };
    *out = Box::into_raw(Box::new(run));
    clear_error();
    PbStatus::PB_OK
}

/// Releases a run handle. Passing null is a no-op.
///
/// # Safety
/// `run` must be null or a pointer obtained from [`pb_run_new`] that has not
/// already been freed.
#[no_mangle]
pub unsafe extern "C" fn pb_run_free(run: *mut PbRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

unsafe fn copy_out(run: *const PbRun, out: *mut *mut c_char, field: fn(&PbRun) -> &CString) -> PbStatus {
    if run.is_null() {
        return fail(PbStatus::PB_NULL_ARG, "run is null");
    }
    if out.is_null() {
        return fail(PbStatus::PB_NULL_ARG, "out is null");
    }
    *out = field(&*run).clone().into_raw();
    PbStatus::PB_OK
}

/// Stores the run's summary row as a JSON object in `*out`.
///
/// # Safety
/// `run` must be a live handle from [`pb_run_new`] and `out` a valid pointer.
/// On `PB_OK` the caller owns `*out` and must release it with
/// [`pb_string_free`].
#[no_mangle]
pub unsafe extern "C" fn pb_run_report_json(run: *const PbRun, out: *mut *mut c_char) -> PbStatus {
    copy_out(run, out, |r| &r.report_json)
}

/// Stores the run's summary row as one CSV line (no trailing newline) in
/// `*out`. Column order matches [`pb_csv_header`].
///
/// # Safety
/// Same contract as [`pb_run_report_json`].
#[no_mangle]
pub unsafe extern "C" fn pb_run_report_csv_row(
    run: *const PbRun,
    out: *mut *mut c_char,
) -> PbStatus {
    copy_out(run, out, |r| &r.csv_row)
}

/// Stores the run's full wire trace as NDJSON in `*out`: a metadata object
/// on the first line, then one delivery record per line.
///
/// # Safety
/// Same contract as [`pb_run_report_json`].
#[no_mangle]
pub unsafe extern "C" fn pb_run_trace_ndjson(run: *const PbRun, out: *mut *mut c_char) -> PbStatus {
    copy_out(run, out, |r| &r.trace_ndjson)
}

/// Writes the run's per-phase message counts (group round, diffusion,
/// flood) into `out[0..3]`.
///
/// # Safety
/// `run` must be a live handle from [`pb_run_new`] and `out` must point to
/// an array of at least three `uint64_t`.
#[no_mangle]
pub unsafe extern "C" fn pb_run_phase_messages(run: *const PbRun, out: *mut u64) -> PbStatus {
    if run.is_null() {
        return fail(PbStatus::PB_NULL_ARG, "run is null");
    }
    if out.is_null() {
        return fail(PbStatus::PB_NULL_ARG, "out is null");
    }
    let phases = (*run).phase_msgs;
    for (i, count) in phases.iter().enumerate() {
        *out.add(i) = *count;
    }
    PbStatus::PB_OK
}

/// Builds the graph described by `config_json` and writes its node count,
/// edge count, and diameter to the three out-pointers. Only the topology
/// fields of the config are consulted, so partial configs work.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated C string; `out_n`,
/// `out_edges`, and `out_diameter` must be valid writable pointers.
#[no_mangle]
pub unsafe extern "C" fn pb_topology_info(
    config_json: *const c_char,
    out_n: *mut u64,
    out_edges: *mut u64,
    out_diameter: *mut u64,
) -> PbStatus {
    if out_n.is_null() || out_edges.is_null() || out_diameter.is_null() {
        return fail(PbStatus::PB_NULL_ARG, "an out-pointer is null");
    }
    let json = match read_utf8(config_json, "config_json") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let cfg = match parse_config(json) {
        Ok(cfg) => cfg,
        Err(status) => return status,
    };
    let topology = match cfg
        .topology
        .build(cfg.n, &mut seeded(cfg.seed, RngPurpose::Topology))
    {
        Ok(t) => t,
        Err(e) => return fail(PbStatus::PB_CONFIG, &e.to_string()),
    };
    *out_n = topology.n() as u64;
    *out_edges = topology.edge_count() as u64;
    *out_diameter = topology.diameter() as u64;
    clear_error();
    PbStatus::PB_OK
}

/// Releases a string returned through an out-pointer. Passing null is a
/// no-op.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library's string
/// out-parameters that has not already been freed.
#[no_mangle]
pub unsafe extern "C" fn pb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Returns a copy of the calling thread's most recent error message, or
/// null if the last call succeeded. The caller owns the copy and must
/// release it with [`pb_string_free`].
#[no_mangle]
pub extern "C" fn pb_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// Returns the CSV header matching [`pb_run_report_csv_row`]. Static; do
/// not free.
#[no_mangle]
pub extern "C" fn pb_csv_header() -> *const c_char {
    static HEADER: OnceLock<CString> = OnceLock::new();
    HEADER
        .get_or_init(|| CString::new(CSV_HEADER).expect("header has no nul"))
        .as_ptr()
}

/// Returns the library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn pb_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}
