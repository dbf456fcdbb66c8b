//! C interface to the jobgrid broker, the target-selection policies and the
//! experiment runner.
//!
//! Every function returns a [`JgStatus`]. On failure a description is kept
//! per thread and can be read with [`jg_last_error_message`]. Handles are
//! opaque and must be released with the matching `*_free` function. Strings
//! handed out by the library are released with [`jg_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use jobgrid::bus::BusError;
use jobgrid::harness::{
    emit_report, run_comparison, run_experiment1, run_experiment2, ExperimentConfig, ExperimentReport, HarnessError,
    ProcessorSpec,
};
use jobgrid::{
    select_target, Broker, BrokerConfig, DeliveryTag, Payload, Priority, ProcessorId, ProcessorSnapshot,
    SchedulingPolicy, SharedClock, VirtualClock, WorkloadParams,
};

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JgStatus {
    Ok = 0,
    /// Nothing to return: the queue has no visible message.
    Empty = 1,
    /// No candidate satisfies the policy.
    NoTarget = 2,
    NullArgument = -1,
    InvalidArgument = -2,
    UnknownQueue = -3,
    UnknownTag = -4,
    ExpiredTag = -5,
    Io = -6,
    InvalidRun = -7,
    Internal = -99,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JgPolicyKind {
    LeastLoad = 0,
    LeastCost = 1,
    Mixed = 2,
    Affinity = 3,
}

/// A scheduling policy. `alpha` is read for `Mixed` only, `affinity` for
/// `Affinity` only.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct JgPolicy {
    pub kind: JgPolicyKind,
    pub alpha: f64,
    pub affinity: u32,
}

/// One live candidate for [`jg_select_target`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct JgProcessorSnapshot {
    pub id: u32,
    pub capacity_total: u32,
    pub current_load: u32,
    pub cost_factor: f64,
}

/// A leased message. Release `message_json` with [`jg_string_free`].
#[repr(C)]
#[derive(Debug)]
pub struct JgDelivery {
    pub tag: u64,
    pub attempt: u32,
    pub message_json: *mut c_char,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JgExperiment {
    /// Every job counts a fixed number of primes.
    FixedWork = 0,
    /// Every job searches for primes for a fixed time.
    FixedTime = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JgExperimentParams {
    pub processors: u32,
    /// Concurrent jobs per priority pool.
    pub capacity: u32,
    pub jobs_low: u32,
    pub jobs_high: u32,
    /// Primes per job for `FixedWork`, milliseconds per job for `FixedTime`.
    pub workload_amount: u64,
    pub seed: u64,
    pub arrival_spacing_ms: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JgExperimentSummary {
    pub dispatched: u32,
    pub completed: u32,
    pub mean_total_ms_high: f64,
    pub mean_total_ms_low: f64,
    pub mean_wait_ms_high: f64,
    pub mean_wait_ms_low: f64,
    pub mean_primes_high: f64,
    pub mean_primes_low: f64,
    pub makespan_ms: u64,
}

/// A broker on its own virtual clock.
pub struct JgBroker {
    broker: Broker,
    clock: VirtualClock,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(JgStatus, String);

impl Failure {
    fn new(status: JgStatus, msg: impl Into<String>) -> Self {
        Failure(status, msg.into())
    }
}

impl From<BusError> for Failure {
    fn from(e: BusError) -> Self {
        let status = match e {
            BusError::UnknownQueue(_) => JgStatus::UnknownQueue,
            BusError::UnknownTag(_) => JgStatus::UnknownTag,
            BusError::ExpiredTag(_) => JgStatus::ExpiredTag,
            BusError::InvalidName(_) | BusError::DuplicateQueue(_) | BusError::Codec(_) => JgStatus::InvalidArgument,
            _ => JgStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let status = match e {
            HarnessError::Config(_) => JgStatus::InvalidArgument,
            HarnessError::Io { .. } => JgStatus::Io,
            _ => JgStatus::InvalidRun,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard<F>(f: F) -> JgStatus
where
    F: FnOnce() -> Result<JgStatus, Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            JgStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(JgStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null-checked already and point to a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(JgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` must be null or a pointer returned by [`jg_broker_open`].
unsafe fn broker<'a>(p: *const JgBroker) -> Result<&'a JgBroker, Failure> {
    non_null(p, "broker")?;
    Ok(&*p)
}

/// Length in bytes of the calling thread's last error message, without the
/// terminating NUL; 0 when there is none.
#[no_mangle]
pub extern "C" fn jg_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |s| s.as_bytes().len()))
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// fit) and returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn jg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn jg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string handed out by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn jg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opens a broker whose clock starts at 0 ms. With a non-null
/// `storage_dir`, queue logs live there and existing logs are replayed;
/// with null, everything stays in memory.
///
/// # Safety
/// `storage_dir` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jg_broker_open(storage_dir: *const c_char, out: *mut *mut JgBroker) -> JgStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let config = if storage_dir.is_null() {
            BrokerConfig::in_memory()
        } else {
            BrokerConfig::durable(PathBuf::from(text(storage_dir, "storage_dir")?))
        };
        let clock = VirtualClock::new(0);
        let shared: SharedClock = Arc::new(clock.clone());
        let broker = Broker::open(config, shared)?;
        *out = Box::into_raw(Box::new(JgBroker { broker, clock }));
        Ok(JgStatus::Ok)
    })
}

/// Closes a broker. Durable queues keep their logs. Null is ignored.
///
/// # Safety
/// `b` must be null or a handle from [`jg_broker_open`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn jg_broker_free(b: *mut JgBroker) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Moves the broker's clock forward, letting leases expire.
///
/// # Safety
/// `b` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn jg_broker_advance_ms(b: *mut JgBroker, ms: u64) -> JgStatus {
    guard(|| {
        broker(b)?.clock.advance(ms);
        Ok(JgStatus::Ok)
    })
}

/// Creates a queue; a durable one needs a broker opened with a directory.
/// Creating an existing queue is not an error.
///
/// # Safety
/// `b` must be a live handle and `queue` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn jg_broker_create_queue(b: *mut JgBroker, queue: *const c_char, durable: bool) -> JgStatus {
    guard(|| {
        let b = broker(b)?;
        let name = text(queue, "queue")?;
        if durable && b.broker.storage_root().is_none() {
            return Err(Failure::new(JgStatus::InvalidArgument, "durable queue on an in-memory broker"));
        }
        match b.broker.create_queue(name, durable) {
            Ok(()) | Err(BusError::DuplicateQueue(_)) => Ok(JgStatus::Ok),
            Err(e) => Err(e.into()),
        }
    })
}

/// Appends a message. `payload_json` is a typed payload such as
/// `{"kind":"HEARTBEAT","payload":{"processor":"P1","current_load":0,"timestamp":5}}`.
/// The new message id is written to `out_msg_id` when that is non-null;
/// release it with [`jg_string_free`].
///
/// # Safety
/// `b` must be a live handle, `queue` and `payload_json` NUL-terminated and
/// `out_msg_id` null or writable.
#[no_mangle]
pub unsafe extern "C" fn jg_broker_enqueue(
    b: *mut JgBroker,
    queue: *const c_char,
    payload_json: *const c_char,
    out_msg_id: *mut *mut c_char,
) -> JgStatus {
    guard(|| {
        let b = broker(b)?;
        let name = text(queue, "queue")?;
        let payload: Payload = serde_json::from_str(text(payload_json, "payload_json")?)
            .map_err(|e| Failure::new(JgStatus::InvalidArgument, format!("payload: {e}")))?;
        let id = b.broker.enqueue(name, payload)?;
        if !out_msg_id.is_null() {
            *out_msg_id = CString::new(id).map_err(|e| Failure::new(JgStatus::Internal, e.to_string()))?.into_raw();
        }
        Ok(JgStatus::Ok)
    })
}

/// Leases the oldest visible message for `visibility_timeout_ms`. Returns
/// [`JgStatus::Empty`] when there is none, leaving `out` zeroed.
///
/// # Safety
/// `b` must be a live handle, `queue` NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn jg_broker_dequeue(
    b: *mut JgBroker,
    queue: *const c_char,
    visibility_timeout_ms: u64,
    out: *mut JgDelivery,
) -> JgStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = JgDelivery { tag: 0, attempt: 0, message_json: ptr::null_mut() };
        let b = broker(b)?;
        let name = text(queue, "queue")?;
        let Some(d) = b.broker.dequeue(name, "ffi", visibility_timeout_ms)? else {
            return Ok(JgStatus::Empty);
        };
        let json = serde_json::to_string(&d.message).map_err(|e| Failure::new(JgStatus::Internal, e.to_string()))?;
        let json = CString::new(json).map_err(|e| Failure::new(JgStatus::Internal, e.to_string()))?;
        *out = JgDelivery { tag: d.delivery_tag.0, attempt: d.attempt, message_json: json.into_raw() };
        Ok(JgStatus::Ok)
    })
}

/// Removes a leased message for good.
///
/// # Safety
/// `b` must be a live handle and `queue` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn jg_broker_ack(b: *mut JgBroker, queue: *const c_char, tag: u64) -> JgStatus {
    guard(|| {
        let b = broker(b)?;
        b.broker.ack(text(queue, "queue")?, DeliveryTag(tag))?;
        Ok(JgStatus::Ok)
    })
}

/// Number of unacked messages, leased or not.
///
/// # Safety
/// `b` must be a live handle, `queue` NUL-terminated and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn jg_broker_len(b: *mut JgBroker, queue: *const c_char, out_len: *mut u64) -> JgStatus {
    guard(|| {
        non_null(out_len, "out_len")?;
        let b = broker(b)?;
        *out_len = b.broker.len(text(queue, "queue")?)? as u64;
        Ok(JgStatus::Ok)
    })
}

fn policy(p: &JgPolicy) -> Result<SchedulingPolicy, Failure> {
    let invalid = |e: jobgrid::model::ParseError| Failure::new(JgStatus::InvalidArgument, e.to_string());
    Ok(match p.kind {
        JgPolicyKind::LeastLoad => SchedulingPolicy::LeastLoad,
        JgPolicyKind::LeastCost => SchedulingPolicy::LeastCost,
        JgPolicyKind::Mixed => SchedulingPolicy::mixed(p.alpha).map_err(invalid)?,
        JgPolicyKind::Affinity => SchedulingPolicy::Affinity(ProcessorId(p.affinity)),
    })
}

/// Picks a target among `count` live candidates. Writes the chosen id to
/// `out_id` and returns [`JgStatus::Ok`], or returns [`JgStatus::NoTarget`].
///
/// # Safety
/// `policy` and `out_id` must be valid; `candidates` must point to `count`
/// snapshots (it may be null when `count` is 0).
#[no_mangle]
pub unsafe extern "C" fn jg_select_target(
    policy_spec: *const JgPolicy,
    candidates: *const JgProcessorSnapshot,
    count: usize,
    out_id: *mut u32,
) -> JgStatus {
    guard(|| {
        non_null(policy_spec, "policy")?;
        non_null(out_id, "out_id")?;
        if count > 0 {
            non_null(candidates, "candidates")?;
        }
        let policy = policy(&*policy_spec)?;
        let raw = if count == 0 { &[][..] } else { std::slice::from_raw_parts(candidates, count) };
        let mut snaps = Vec::with_capacity(count);
        for c in raw {
            if c.capacity_total == 0 || !(c.cost_factor >= 0.0 && c.cost_factor.is_finite()) {
                return Err(Failure::new(JgStatus::InvalidArgument, format!("bad snapshot for P{}", c.id)));
            }
            snaps.push(ProcessorSnapshot {
                id: ProcessorId(c.id),
                capacity_total: c.capacity_total,
                current_load: c.current_load,
                reported_load: c.current_load,
                cost_factor: c.cost_factor,
                last_heartbeat: None,
            });
        }
        match select_target(&policy, &snaps).target() {
            Some(id) => {
                *out_id = id.0;
                Ok(JgStatus::Ok)
            }
            None => Ok(JgStatus::NoTarget),
        }
    })
}

/// Fills `out` with the reference parameters for `kind`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jg_experiment_defaults(kind: JgExperiment, out: *mut JgExperimentParams) -> JgStatus {
    guard(|| {
        non_null(out, "out")?;
        let c = base_config(kind);
        *out = JgExperimentParams {
            processors: c.processors.len() as u32,
            capacity: c.processors[0].capacity,
            jobs_low: c.jobs_low,
            jobs_high: c.jobs_high,
            workload_amount: match c.workload {
                WorkloadParams::PrimeCount(p) => p.target_count,
                WorkloadParams::PrimeTimed(p) => p.duration_ms,
            },
            seed: c.seed,
            arrival_spacing_ms: c.arrival_spacing_ms,
        };
        Ok(JgStatus::Ok)
    })
}

/// Fills `out` with the reference parameters for [`jg_run_comparison`]:
/// four nodes and one arrival every 50 ms.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jg_comparison_defaults(out: *mut JgExperimentParams) -> JgStatus {
    let status = jg_experiment_defaults(JgExperiment::FixedWork, out);
    if status == JgStatus::Ok {
        let c = ExperimentConfig::comparison();
        (*out).processors = c.processors.len() as u32;
        (*out).arrival_spacing_ms = c.arrival_spacing_ms;
    }
    status
}

fn base_config(kind: JgExperiment) -> ExperimentConfig {
    match kind {
        JgExperiment::FixedWork => ExperimentConfig::experiment1(),
        JgExperiment::FixedTime => ExperimentConfig::experiment2(),
    }
}

fn experiment_config(kind: JgExperiment, p: &JgExperimentParams) -> Result<ExperimentConfig, Failure> {
    let invalid = |e: jobgrid::workload::WorkloadError| Failure::new(JgStatus::InvalidArgument, e.to_string());
    if p.processors == 0 || p.capacity == 0 {
        return Err(Failure::new(JgStatus::InvalidArgument, "processors and capacity must be positive"));
    }
    let workload = match kind {
        JgExperiment::FixedWork => WorkloadParams::count(p.workload_amount).map_err(invalid)?,
        JgExperiment::FixedTime => WorkloadParams::timed(p.workload_amount).map_err(invalid)?,
    };
    Ok(ExperimentConfig {
        processors: vec![ProcessorSpec::new(p.capacity, 1.0); p.processors as usize],
        jobs_low: p.jobs_low,
        jobs_high: p.jobs_high,
        workload,
        seed: p.seed,
        arrival_spacing_ms: p.arrival_spacing_ms,
        ..base_config(kind)
    })
}

fn summarize(r: &ExperimentReport) -> JgExperimentSummary {
    let high = r.by_priority(Priority::HIGH);
    let low = r.by_priority(Priority::LOW);
    JgExperimentSummary {
        dispatched: r.dispatched as u32,
        completed: r.rows.len() as u32,
        mean_total_ms_high: high.mean_total_ms,
        mean_total_ms_low: low.mean_total_ms,
        mean_wait_ms_high: high.mean_wait_ms,
        mean_wait_ms_low: low.mean_wait_ms,
        mean_primes_high: high.mean_primes,
        mean_primes_low: low.mean_primes,
        makespan_ms: r.makespan_ms,
    }
}

/// Runs one experiment on a virtual clock. With a non-null `out_dir`,
/// `jobs.csv` and `summary.csv` are written there. Returns
/// [`JgStatus::InvalidRun`] (with `out` still filled) when a job did not
/// complete.
///
/// # Safety
/// `params` and `out` must be valid; `out_dir` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn jg_run_experiment(
    kind: JgExperiment,
    params: *const JgExperimentParams,
    out_dir: *const c_char,
    out: *mut JgExperimentSummary,
) -> JgStatus {
    guard(|| {
        non_null(params, "params")?;
        non_null(out, "out")?;
        *out = JgExperimentSummary::default();
        let config = experiment_config(kind, &*params)?;
        let report = match kind {
            JgExperiment::FixedWork => run_experiment1(&config)?,
            JgExperiment::FixedTime => run_experiment2(&config)?,
        };
        *out = summarize(&report);
        if !out_dir.is_null() {
            emit_report(&report, text(out_dir, "out_dir")?)?;
        }
        if !report.is_valid() {
            return Err(Failure::new(JgStatus::InvalidRun, format!("{} job(s) did not complete", report.invalid.len())));
        }
        Ok(JgStatus::Ok)
    })
}

/// Runs the same fixed-work stream through the scheduler and through
/// sender-initiated routing, and writes the relative reduction in mean
/// total time to `out_improvement`.
///
/// # Safety
/// `params` and `out_improvement` must be valid.
#[no_mangle]
pub unsafe extern "C" fn jg_run_comparison(
    params: *const JgExperimentParams,
    per_query_latency_ms: u64,
    out_improvement: *mut f64,
) -> JgStatus {
    guard(|| {
        non_null(params, "params")?;
        non_null(out_improvement, "out_improvement")?;
        let config = experiment_config(JgExperiment::FixedWork, &*params)?;
        let report = run_comparison(&config, per_query_latency_ms)?;
        *out_improvement = report.improvement();
        if !report.is_valid() {
            return Err(Failure::new(JgStatus::InvalidRun, "a job did not complete"));
        }
        Ok(JgStatus::Ok)
    })
}
