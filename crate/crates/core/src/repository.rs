//! Central store for job definitions, job records and the processor registry.
//!
//! State is held in memory and, when opened on a directory, journaled to
//! `repo.jlog` using the same frame format as the broker. Reopening replays
//! the journal. Every job update goes through the lifecycle state machine, so
//! an illegal lifecycle can never be stored.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::framing::LogFile;
use crate::model::{
    JobId, JobRecord, JobStatus, Priority, ProcessorId, ProcessorInfo, SchedulingPolicy, StatusUpdate,
};
use crate::workload::{PrimeResult, WorkloadParams};

pub const JOURNAL_FILE: &str = "repo.jlog";

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("unknown processor {0}")]
    UnknownProcessor(ProcessorId),
    #[error("processor {0} is already registered")]
    DuplicateProcessor(ProcessorId),
    #[error("job definition `{0}` already exists")]
    DuplicateDefinition(String),
    #[error("unknown job definition `{0}`")]
    UnknownDefinition(String),
    #[error("job {job}: illegal transition {from} -> {to}")]
    IllegalTransition { job: JobId, from: JobStatus, to: JobStatus },
    #[error("invalid processor registration: {0}")]
    InvalidProcessor(String),
    #[error("journal I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("journal encoding: {0}")]
    Codec(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobDefinition {
    pub definition_id: String,
    #[serde(flatten)]
    pub workload: WorkloadParams,
    pub default_priority: Priority,
}

impl JobDefinition {
    /// Definition whose id is the workload's canonical name.
    pub fn for_workload(workload: WorkloadParams, default_priority: Priority) -> Self {
        Self { definition_id: workload.definition_id(), workload, default_priority }
    }
}

/// What the scheduler and reports see for one processor.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessorSnapshot {
    pub id: ProcessorId,
    pub capacity_total: u32,
    /// Jobs assigned to the processor and not yet finished (SCHEDULED or
    /// IN_PROGRESS with this target).
    pub current_load: u32,
    /// Load figure carried by the latest heartbeat.
    pub reported_load: u32,
    pub cost_factor: f64,
    pub last_heartbeat: Option<u64>,
}

impl ProcessorSnapshot {
    pub fn is_available(&self, now: u64, liveness_window_ms: u64) -> bool {
        self.last_heartbeat
            .is_some_and(|hb| now.saturating_sub(hb) <= liveness_window_ms)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JobFilter {
    pub status: Option<JobStatus>,
    pub priority: Option<Priority>,
    pub target: Option<ProcessorId>,
}

impl JobFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn status(mut self, s: JobStatus) -> Self {
        self.status = Some(s);
        self
    }

    pub fn priority(mut self, p: Priority) -> Self {
        self.priority = Some(p);
        self
    }

    pub fn target(mut self, t: ProcessorId) -> Self {
        self.target = Some(t);
        self
    }

    pub fn matches(&self, job: &JobRecord) -> bool {
        self.status.is_none_or(|s| job.status == s)
            && self.priority.is_none_or(|p| job.priority == p)
            && self.target.is_none_or(|t| job.target == Some(t))
    }
}

/// Result of applying a status message.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Applied {
    Updated(JobRecord),
    /// The job was already terminal or already in the requested state.
    Ignored,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum JournalRecord {
    JobDef(JobDefinition),
    JobUpsert(JobRecord),
    ProcRegister {
        id: ProcessorId,
        capacity_total: u32,
        cost_factor: f64,
    },
    ProcStatus {
        id: ProcessorId,
        load: u32,
        heartbeat_at: u64,
    },
}

#[derive(Clone, Debug)]
struct ProcEntry {
    capacity_total: u32,
    cost_factor: f64,
    reported_load: u32,
    last_heartbeat: Option<u64>,
}

#[derive(Default)]
struct Inner {
    definitions: BTreeMap<String, JobDefinition>,
    jobs: BTreeMap<JobId, JobRecord>,
    processors: BTreeMap<ProcessorId, ProcEntry>,
    assigned: HashMap<ProcessorId, u32>,
    next_job: u64,
    journal: Option<LogFile>,
}

fn counts_as_load(job: &JobRecord) -> Option<ProcessorId> {
    match job.status {
        JobStatus::Scheduled | JobStatus::InProgress => job.target,
        _ => None,
    }
}

impl Inner {
    fn write(&mut self, rec: &JournalRecord) -> Result<(), RepoError> {
        if let Some(j) = self.journal.as_mut() {
            let bytes = serde_json::to_vec(rec)?;
            j.append(&bytes).map_err(|source| RepoError::Io { path: j.path().to_path_buf(), source })?;
        }
        Ok(())
    }

    fn put_job(&mut self, job: JobRecord) {
        if let Some(old) = self.jobs.get(&job.id) {
            if let Some(p) = counts_as_load(old) {
                if let Some(n) = self.assigned.get_mut(&p) {
                    *n = n.saturating_sub(1);
                }
            }
        }
        if let Some(p) = counts_as_load(&job) {
            *self.assigned.entry(p).or_default() += 1;
        }
        self.next_job = self.next_job.max(job.id.0 + 1);
        self.jobs.insert(job.id, job);
    }

    fn persist_job(&mut self, job: JobRecord) -> Result<(), RepoError> {
        self.write(&JournalRecord::JobUpsert(job.clone()))?;
        self.put_job(job);
        Ok(())
    }

    fn apply(&mut self, rec: JournalRecord) {
        match rec {
            JournalRecord::JobDef(d) => {
                self.definitions.insert(d.definition_id.clone(), d);
            }
            JournalRecord::JobUpsert(j) => self.put_job(j),
            JournalRecord::ProcRegister { id, capacity_total, cost_factor } => {
                self.processors.insert(
                    id,
                    ProcEntry { capacity_total, cost_factor, reported_load: 0, last_heartbeat: None },
                );
            }
            JournalRecord::ProcStatus { id, load, heartbeat_at } => {
                if let Some(p) = self.processors.get_mut(&id) {
                    if p.last_heartbeat.is_none_or(|hb| heartbeat_at >= hb) {
                        p.reported_load = load;
                        p.last_heartbeat = Some(heartbeat_at);
                    }
                }
            }
        }
    }

    fn job_mut(&mut self, id: JobId) -> Result<JobRecord, RepoError> {
        self.jobs.get(&id).cloned().ok_or(RepoError::UnknownJob(id))
    }

    fn snapshot(&self, id: ProcessorId, p: &ProcEntry) -> ProcessorSnapshot {
        ProcessorSnapshot {
            id,
            capacity_total: p.capacity_total,
            current_load: self.assigned.get(&id).copied().unwrap_or(0),
            reported_load: p.reported_load,
            cost_factor: p.cost_factor,
            last_heartbeat: p.last_heartbeat,
        }
    }
}

/// Job bookkeeping needed by the dispatcher. Deliberately excludes the
/// processor registry.
pub trait JobStore: Send + Sync {
    fn definition(&self, id: &str) -> Option<JobDefinition>;
    fn create_job(
        &self,
        definition_id: &str,
        priority: Priority,
        policy: SchedulingPolicy,
        at: u64,
    ) -> Result<JobRecord, RepoError>;
    fn update_job_status(&self, id: JobId, status: JobStatus, at: u64) -> Result<JobRecord, RepoError>;
    fn set_retriable(&self, id: JobId, retriable: bool) -> Result<(), RepoError>;
    fn query_jobs(&self, filter: &JobFilter) -> Vec<JobRecord>;
}

pub struct Repository {
    inner: Mutex<Inner>,
    root: Option<PathBuf>,
}

impl std::fmt::Debug for Repository {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Repository").field("root", &self.root).finish_non_exhaustive()
    }
}

impl Repository {
    pub fn in_memory() -> Self {
        Self { inner: Mutex::new(Inner { next_job: 1, ..Default::default() }), root: None }
    }

    /// Opens (or creates) the journal under `root` and replays it.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, RepoError> {
        let root = root.as_ref();
        let io = |source| RepoError::Io { path: root.to_path_buf(), source };
        fs::create_dir_all(root).map_err(io)?;
        let path = root.join(JOURNAL_FILE);
        let mut inner = Inner { next_job: 1, ..Default::default() };
        let log = if path.exists() {
            let (log, scan) = LogFile::open_and_scan(&path, false)
                .map_err(|source| RepoError::Io { path: path.clone(), source })?;
            for skip in &scan.skipped {
                tracing::warn!(offset = skip.offset, "skipping unreadable journal record");
            }
            for (offset, body) in scan.records {
                match serde_json::from_slice::<JournalRecord>(&body) {
                    Ok(rec) => inner.apply(rec),
                    Err(e) => tracing::warn!(offset, error = %e, "skipping undecodable journal record"),
                }
            }
            log
        } else {
            LogFile::create(&path, false).map_err(|source| RepoError::Io { path: path.clone(), source })?
        };
        inner.journal = Some(log);
        Ok(Self { inner: Mutex::new(inner), root: Some(root.to_path_buf()) })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn define_job(&self, def: JobDefinition) -> Result<(), RepoError> {
        def.workload
            .validate()
            .map_err(|_| RepoError::UnknownDefinition(def.definition_id.clone()))?;
        let mut g = self.inner.lock().unwrap();
        if g.definitions.contains_key(&def.definition_id) {
            return Err(RepoError::DuplicateDefinition(def.definition_id));
        }
        let rec = JournalRecord::JobDef(def);
        g.write(&rec)?;
        g.apply(rec);
        Ok(())
    }

    /// Defines the job unless an identical id already exists.
    pub fn ensure_definition(&self, def: JobDefinition) -> Result<(), RepoError> {
        match self.define_job(def) {
            Ok(()) | Err(RepoError::DuplicateDefinition(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub fn definitions(&self) -> Vec<JobDefinition> {
        self.inner.lock().unwrap().definitions.values().cloned().collect()
    }

    /// Adds a processor. It becomes available once its first heartbeat lands.
    pub fn register_processor(&self, info: &ProcessorInfo) -> Result<ProcessorId, RepoError> {
        if info.capacity_total() == 0 {
            return Err(RepoError::InvalidProcessor("capacity must be positive".into()));
        }
        if !(info.cost_factor >= 0.0 && info.cost_factor.is_finite()) {
            return Err(RepoError::InvalidProcessor(format!("cost factor {}", info.cost_factor)));
        }
        let mut g = self.inner.lock().unwrap();
        let id = match info.id {
            Some(id) if g.processors.contains_key(&id) => return Err(RepoError::DuplicateProcessor(id)),
            Some(id) => id,
            None => ProcessorId(g.processors.keys().next_back().map_or(1, |p| p.0 + 1)),
        };
        let rec = JournalRecord::ProcRegister {
            id,
            capacity_total: info.capacity_total(),
            cost_factor: info.cost_factor,
        };
        g.write(&rec)?;
        g.apply(rec);
        Ok(id)
    }

    /// Records a heartbeat. Returns `false` when the update was older than
    /// the stored one and therefore ignored.
    pub fn update_processor_status(
        &self,
        id: ProcessorId,
        load: u32,
        heartbeat_at: u64,
    ) -> Result<bool, RepoError> {
        let mut g = self.inner.lock().unwrap();
        let p = g.processors.get(&id).ok_or(RepoError::UnknownProcessor(id))?;
        if p.last_heartbeat.is_some_and(|hb| heartbeat_at < hb) {
            return Ok(false);
        }
        let rec = JournalRecord::ProcStatus { id, load, heartbeat_at };
        g.write(&rec)?;
        g.apply(rec);
        Ok(true)
    }

    pub fn processor(&self, id: ProcessorId) -> Option<ProcessorSnapshot> {
        let g = self.inner.lock().unwrap();
        g.processors.get(&id).map(|p| g.snapshot(id, p))
    }

    /// Every registered processor, sorted by id.
    pub fn processors(&self) -> Vec<ProcessorSnapshot> {
        let g = self.inner.lock().unwrap();
        g.processors.iter().map(|(id, p)| g.snapshot(*id, p)).collect()
    }

    /// Processors whose last heartbeat is within `liveness_window_ms` of `now`,
    /// sorted by id.
    pub fn list_available_processors(&self, now: u64, liveness_window_ms: u64) -> Vec<ProcessorSnapshot> {
        self.processors()
            .into_iter()
            .filter(|p| p.is_available(now, liveness_window_ms))
            .collect()
    }

    pub fn record_job(&self, record: JobRecord) -> Result<(), RepoError> {
        let mut g = self.inner.lock().unwrap();
        g.persist_job(record)
    }

    pub fn job(&self, id: JobId) -> Option<JobRecord> {
        self.inner.lock().unwrap().jobs.get(&id).cloned()
    }

    /// Moves a job along the lifecycle, deriving timing on IN_PROGRESS and on
    /// terminal states.
    pub fn update_job_status(&self, id: JobId, status: JobStatus, at: u64) -> Result<JobRecord, RepoError> {
        let mut g = self.inner.lock().unwrap();
        let mut job = g.job_mut(id)?;
        job.transition(status, at)
            .map_err(|from| RepoError::IllegalTransition { job: id, from, to: status })?;
        g.persist_job(job.clone())?;
        Ok(job)
    }

    /// DISPATCHED -> SCHEDULED with `target`, only if the job is still
    /// DISPATCHED. Returns `false` when another scheduler got there first or
    /// the job moved on.
    pub fn try_schedule(&self, id: JobId, target: ProcessorId, at: u64) -> Result<bool, RepoError> {
        let mut g = self.inner.lock().unwrap();
        let mut job = g.job_mut(id)?;
        if job.status != JobStatus::Dispatched {
            return Ok(false);
        }
        job.transition(JobStatus::Scheduled, at).expect("checked above");
        job.target = Some(target);
        g.persist_job(job)?;
        Ok(true)
    }

    /// Applies a processor-reported status. Duplicates and updates for
    /// terminal jobs are ignored rather than rejected.
    pub fn apply_status(&self, update: &StatusUpdate) -> Result<Applied, RepoError> {
        let mut g = self.inner.lock().unwrap();
        let mut job = g.job_mut(update.job_id)?;
        if job.status.is_terminal() || job.status == update.status {
            return Ok(Applied::Ignored);
        }
        job.transition(update.status, update.at).map_err(|from| RepoError::IllegalTransition {
            job: update.job_id,
            from,
            to: update.status,
        })?;
        if let Some(p) = update.processor {
            job.target.get_or_insert(p);
        }
        if let Some(r) = update.result {
            job.result_payload = Some(r);
        }
        if update.error.is_some() {
            job.error = update.error.clone();
        }
        if job.status == JobStatus::Completed {
            job.latest_progress = Some(1.0);
        }
        g.persist_job(job.clone())?;
        Ok(Applied::Updated(job))
    }

    /// Stores the latest progress fraction. Never regresses and never touches
    /// the lifecycle.
    pub fn set_progress(&self, id: JobId, fraction: f64) -> Result<bool, RepoError> {
        let mut g = self.inner.lock().unwrap();
        let mut job = g.job_mut(id)?;
        if job.status.is_terminal() || job.latest_progress.is_some_and(|p| p >= fraction) {
            return Ok(false);
        }
        job.latest_progress = Some(fraction.clamp(0.0, 1.0));
        g.persist_job(job)?;
        Ok(true)
    }

    pub fn set_result(&self, id: JobId, result: PrimeResult) -> Result<(), RepoError> {
        let mut g = self.inner.lock().unwrap();
        let mut job = g.job_mut(id)?;
        job.result_payload = Some(result);
        g.persist_job(job)
    }

    /// Matching jobs ordered by id.
    pub fn query_jobs(&self, filter: &JobFilter) -> Vec<JobRecord> {
        self.inner.lock().unwrap().jobs.values().filter(|j| filter.matches(j)).cloned().collect()
    }

    pub fn job_count(&self) -> usize {
        self.inner.lock().unwrap().jobs.len()
    }
}

impl JobStore for Repository {
    fn definition(&self, id: &str) -> Option<JobDefinition> {
        self.inner.lock().unwrap().definitions.get(id).cloned()
    }

    fn create_job(
        &self,
        definition_id: &str,
        priority: Priority,
        policy: SchedulingPolicy,
        at: u64,
    ) -> Result<JobRecord, RepoError> {
        let mut g = self.inner.lock().unwrap();
        if !g.definitions.contains_key(definition_id) {
            return Err(RepoError::UnknownDefinition(definition_id.to_string()));
        }
        let id = JobId(g.next_job);
        let job = JobRecord::new(id, definition_id, priority, policy, at);
        g.persist_job(job.clone())?;
        Ok(job)
    }

    fn update_job_status(&self, id: JobId, status: JobStatus, at: u64) -> Result<JobRecord, RepoError> {
        Repository::update_job_status(self, id, status, at)
    }

    fn set_retriable(&self, id: JobId, retriable: bool) -> Result<(), RepoError> {
        let mut g = self.inner.lock().unwrap();
        let mut job = g.job_mut(id)?;
        job.retriable = retriable;
        g.persist_job(job)
    }

    fn query_jobs(&self, filter: &JobFilter) -> Vec<JobRecord> {
        Repository::query_jobs(self, filter)
    }
}
