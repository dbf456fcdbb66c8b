//! Job execution.
//!
//! A processor consumes its `dispatch.<id>` queue, routes each job into the
//! pool for its priority and runs admitted jobs as resumable chunks. Compute
//! slices are handed to pools by smooth weighted round-robin, so with both
//! pools saturated a weight-2 pool receives two slices for every one given to
//! a weight-1 pool. Within a pool, running jobs take turns.
//!
//! Job status, progress and heartbeats are published to `status`. A dispatch
//! delivery is acked only after the job's terminal status is published.

mod pool;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use thiserror::Error;

use crate::bus::{Broker, BusError, Consumer, Delivery, DeliveryTag, Publisher, STATUS_QUEUE};
use crate::clock::SharedClock;
use crate::model::{
    HeartbeatPayload, JobId, JobStatus, Payload, Priority, ProcessorId, ProcessorInfo, ProgressUpdate,
    StatusUpdate,
};
use crate::repository::{JobStore, RepoError, Repository};
use crate::workload::{PrimeSearch, WorkloadParams, DEFAULT_SLICE_BUDGET};

pub use pool::{Admission, PriorityWorkerPool};

#[derive(Debug, Error)]
pub enum ProcessorError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error("invalid processor configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessorConfig {
    /// Requested id; `None` lets the registry assign one.
    pub id: Option<ProcessorId>,
    /// Concurrent job slots per priority pool.
    pub capacity: u32,
    /// One pool per entry: `(priority, compute weight)`.
    pub weights: Vec<(Priority, u32)>,
    pub cost_factor: f64,
    /// Candidate integers examined per compute slice.
    pub slice_budget: u64,
    pub heartbeat_interval_ms: u64,
    pub progress_interval_ms: u64,
}

impl Default for ProcessorConfig {
    fn default() -> Self {
        Self {
            id: None,
            capacity: 10,
            weights: vec![(Priority::HIGH, 2), (Priority::LOW, 1)],
            cost_factor: 1.0,
            slice_budget: DEFAULT_SLICE_BUDGET,
            heartbeat_interval_ms: 500,
            progress_interval_ms: 1000,
        }
    }
}

impl ProcessorConfig {
    pub fn info(&self) -> ProcessorInfo {
        ProcessorInfo {
            id: self.id,
            pool_capacity_per_priority: self.capacity,
            pool_count: self.weights.len() as u32,
            cost_factor: self.cost_factor,
        }
    }

    fn validate(&self) -> Result<(), ProcessorError> {
        let bad = |m: &str| Err(ProcessorError::Config(m.to_string()));
        if self.capacity == 0 {
            return bad("capacity must be positive");
        }
        if self.weights.is_empty() {
            return bad("at least one pool is required");
        }
        if self.weights.iter().any(|(_, w)| *w == 0) {
            return bad("pool weights must be positive");
        }
        let distinct: HashSet<_> = self.weights.iter().map(|(p, _)| p).collect();
        if distinct.len() != self.weights.len() {
            return bad("duplicate pool priority");
        }
        if self.slice_budget == 0 || self.heartbeat_interval_ms == 0 || self.progress_interval_ms == 0 {
            return bad("slice budget and intervals must be positive");
        }
        Ok(())
    }
}

#[derive(Debug)]
struct ActiveJob {
    priority: Priority,
    search: PrimeSearch,
    tag: DeliveryTag,
    started_at: Option<u64>,
    last_progress_at: u64,
}

/// What happened to one dispatch delivery.
#[derive(Clone, Debug, PartialEq)]
pub enum Intake {
    Admitted(JobId, Admission),
    Failed(JobId, String),
    /// Already held, already finished, or not addressed to this processor.
    Dropped(JobId),
    /// The scheduler's claim has not landed yet; left for redelivery.
    Deferred(JobId),
    Ignored,
}

pub struct Processor {
    id: ProcessorId,
    config: ProcessorConfig,
    repo: Arc<Repository>,
    dispatch: Consumer,
    publisher: Publisher,
    clock: SharedClock,
    pools: BTreeMap<Priority, PriorityWorkerPool>,
    // smooth weighted round-robin state, keyed like `pools`
    credit: BTreeMap<Priority, i64>,
    jobs: HashMap<JobId, ActiveJob>,
    finished: HashSet<JobId>,
    last_heartbeat: Option<u64>,
    heartbeats_paused: bool,
    slices: BTreeMap<Priority, u64>,
    idle_slices: u64,
}

impl std::fmt::Debug for Processor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Processor").field("id", &self.id).field("load", &self.load()).finish()
    }
}

impl Processor {
    /// Registers with the repository and opens the dispatch queue.
    pub fn start(broker: Arc<Broker>, repo: Arc<Repository>, config: ProcessorConfig) -> Result<Self, ProcessorError> {
        config.validate()?;
        let id = repo.register_processor(&config.info())?;
        Self::attach(broker, repo, config, id)
    }

    /// Binds to an already-registered processor id.
    pub fn attach(
        broker: Arc<Broker>,
        repo: Arc<Repository>,
        mut config: ProcessorConfig,
        id: ProcessorId,
    ) -> Result<Self, ProcessorError> {
        config.validate()?;
        config.id = Some(id);
        broker.ensure_queue(&id.dispatch_queue())?;
        broker.ensure_queue(STATUS_QUEUE)?;
        let pools = config
            .weights
            .iter()
            .map(|&(p, w)| (p, PriorityWorkerPool::new(p, config.capacity, w)))
            .collect();
        let credit = config.weights.iter().map(|&(p, _)| (p, 0)).collect();
        Ok(Self {
            id,
            repo,
            dispatch: Consumer::new(broker.clone(), id.dispatch_queue(), id.to_string()),
            publisher: Publisher::new(broker.clone()),
            clock: broker.clock().clone(),
            pools,
            credit,
            jobs: HashMap::new(),
            finished: HashSet::new(),
            last_heartbeat: None,
            heartbeats_paused: false,
            slices: BTreeMap::new(),
            idle_slices: 0,
            config,
        })
    }

    pub fn id(&self) -> ProcessorId {
        self.id
    }

    pub fn config(&self) -> &ProcessorConfig {
        &self.config
    }

    pub fn rebind(&mut self, broker: Arc<Broker>) {
        self.dispatch.rebind(broker.clone());
        self.publisher.rebind(broker);
    }

    pub fn pool(&self, p: Priority) -> Option<&PriorityWorkerPool> {
        self.pools.get(&p)
    }

    /// Jobs admitted and not finished: running plus backlogged.
    pub fn load(&self) -> u32 {
        self.pools.values().map(|p| p.load() as u32).sum()
    }

    pub fn running(&self) -> usize {
        self.pools.values().map(|p| p.running().len()).sum()
    }

    pub fn is_idle(&self) -> bool {
        self.load() == 0
    }

    /// Compute slices granted to a pool so far.
    pub fn slices_granted(&self, p: Priority) -> u64 {
        self.slices.get(&p).copied().unwrap_or(0)
    }

    pub fn idle_slices(&self) -> u64 {
        self.idle_slices
    }

    /// Stops (or resumes) heartbeats, simulating a silent node.
    pub fn pause_heartbeats(&mut self, paused: bool) {
        self.heartbeats_paused = paused;
    }

    fn publish_status(&self, update: StatusUpdate) -> Result<(), BusError> {
        self.publisher.publish(STATUS_QUEUE, Payload::JobStatus(update)).map(drop)
    }

    fn status(&self, job_id: JobId, status: JobStatus, at: u64) -> StatusUpdate {
        StatusUpdate { job_id, status, at, processor: Some(self.id), result: None, error: None }
    }

    /// Drains every visible dispatch delivery.
    pub fn poll_dispatch(&mut self) -> Result<Vec<Intake>, ProcessorError> {
        let mut out = Vec::new();
        while let Some(d) = self.dispatch.poll()? {
            out.push(self.intake(d)?);
        }
        Ok(out)
    }

    fn intake(&mut self, d: Delivery) -> Result<Intake, ProcessorError> {
        let Payload::JobRequest(req) = &d.message.body else {
            self.dispatch.ack(d.delivery_tag)?;
            return Ok(Intake::Ignored);
        };
        let id = req.job_id;
        if let Some(active) = self.jobs.get_mut(&id) {
            // redelivery of a job already held: keep the newest lease
            active.tag = d.delivery_tag;
            return Ok(Intake::Dropped(id));
        }
        if self.finished.contains(&id) {
            self.dispatch.ack(d.delivery_tag)?;
            return Ok(Intake::Dropped(id));
        }
        let Some(job) = self.repo.job(id) else {
            self.dispatch.ack(d.delivery_tag)?;
            return Ok(Intake::Dropped(id));
        };
        match job.status {
            JobStatus::Dispatched => return Ok(Intake::Deferred(id)),
            JobStatus::Scheduled | JobStatus::InProgress if job.target == Some(self.id) => {}
            _ => {
                self.dispatch.ack(d.delivery_tag)?;
                return Ok(Intake::Dropped(id));
            }
        }
        let workload = match self.repo.definition(&job.definition_id) {
            Some(def) => def.workload,
            None => {
                let reason = format!("unknown job definition `{}`", job.definition_id);
                self.reject(id, d.delivery_tag, &reason)?;
                return Ok(Intake::Failed(id, reason));
            }
        };
        self.assign_to_pool(id, job.priority, workload, d.delivery_tag)
    }

    fn reject(&mut self, id: JobId, tag: DeliveryTag, reason: &str) -> Result<(), ProcessorError> {
        let now = self.clock.now_ms();
        tracing::warn!(processor = %self.id, job = %id, reason, "job rejected");
        self.publish_status(self.status(id, JobStatus::InProgress, now))?;
        let mut failed = self.status(id, JobStatus::Failed, now);
        failed.error = Some(reason.to_string());
        self.publish_status(failed)?;
        self.dispatch.ack(tag)?;
        self.finished.insert(id);
        Ok(())
    }

    /// Routes a job to the pool for its priority. A job that gets a free slot
    /// starts immediately and reports IN_PROGRESS; otherwise it waits in the
    /// pool's backlog. An unknown priority fails the job.
    pub fn assign_to_pool(
        &mut self,
        id: JobId,
        priority: Priority,
        workload: WorkloadParams,
        tag: DeliveryTag,
    ) -> Result<Intake, ProcessorError> {
        let Some(pool) = self.pools.get_mut(&priority) else {
            let reason = format!("no pool for priority {priority}");
            self.reject(id, tag, &reason)?;
            return Ok(Intake::Failed(id, reason));
        };
        let admission = pool.admit(id);
        let now = self.clock.now_ms();
        self.jobs.insert(
            id,
            ActiveJob { priority, search: PrimeSearch::new(workload), tag, started_at: None, last_progress_at: now },
        );
        if admission == Admission::Running {
            self.begin(id, now)?;
        }
        Ok(Intake::Admitted(id, admission))
    }

    fn begin(&mut self, id: JobId, now: u64) -> Result<(), ProcessorError> {
        if let Some(job) = self.jobs.get_mut(&id) {
            job.started_at = Some(now);
            job.last_progress_at = now;
        }
        self.publish_status(self.status(id, JobStatus::InProgress, now))?;
        Ok(())
    }

    /// Publishes COMPLETED, then acks the dispatch delivery, then frees the
    /// slot for the next backlogged job.
    fn complete(&mut self, id: JobId, now: u64) -> Result<(), ProcessorError> {
        let Some(job) = self.jobs.remove(&id) else { return Ok(()) };
        let mut update = self.status(id, JobStatus::Completed, now);
        update.result = Some(job.search.result());
        self.publish_status(update)?;
        match self.dispatch.ack(job.tag) {
            Ok(()) => {}
            Err(BusError::ExpiredTag(_) | BusError::UnknownTag(_)) => {
                // lease lost (e.g. broker restart); the redelivered copy is
                // dropped via `finished`
                tracing::debug!(processor = %self.id, job = %id, "dispatch lease lost before ack");
            }
            Err(e) => return Err(e.into()),
        }
        self.finished.insert(id);
        let promoted = self.pools.get_mut(&job.priority).and_then(|p| p.release(id));
        if let Some(next) = promoted {
            self.begin(next, now)?;
        }
        Ok(())
    }

    fn pick_pool(&mut self) -> Option<Priority> {
        let eligible: Vec<(Priority, i64)> = self
            .pools
            .iter()
            .filter(|(_, p)| !p.running().is_empty())
            .map(|(k, p)| (*k, p.weight() as i64))
            .collect();
        if eligible.is_empty() {
            return None;
        }
        let total: i64 = eligible.iter().map(|(_, w)| w).sum();
        let mut best: Option<(Priority, i64)> = None;
        for (p, w) in &eligible {
            let c = self.credit.get_mut(p).expect("credit per pool");
            *c += w;
            // higher priority wins equal credit
            if best.is_none_or(|(_, bc)| *c >= bc) {
                best = Some((*p, *c));
            }
        }
        for (p, c) in self.credit.iter_mut() {
            if !eligible.iter().any(|(e, _)| e == p) {
                *c = 0;
            }
        }
        let (chosen, _) = best?;
        *self.credit.get_mut(&chosen).unwrap() -= total;
        Some(chosen)
    }

    /// Runs up to `slices` compute slices. Slices with nothing to run are
    /// counted as idle.
    pub fn compute(&mut self, slices: u64) -> Result<(), ProcessorError> {
        let now = self.clock.now_ms();
        for _ in 0..slices {
            let Some(p) = self.pick_pool() else {
                self.idle_slices += 1;
                continue;
            };
            let job_id = self.pools.get_mut(&p).and_then(|pool| pool.next_slice()).expect("eligible pool");
            *self.slices.entry(p).or_default() += 1;
            let budget = self.config.slice_budget;
            let job = self.jobs.get_mut(&job_id).expect("running job is tracked");
            let done = match job.search.run_chunk(budget) {
                Ok(done) => done,
                Err(e) => {
                    tracing::error!(job = %job_id, error = %e, "workload error");
                    true
                }
            };
            if done {
                self.complete(job_id, now)?;
            }
        }
        Ok(())
    }

    /// Ends timed jobs whose duration has elapsed, then emits due progress
    /// reports and the heartbeat.
    pub fn tick(&mut self) -> Result<(), ProcessorError> {
        self.expire_due()?;
        self.report_periodic()
    }

    /// Completes every timed job whose duration has elapsed.
    pub fn expire_due(&mut self) -> Result<(), ProcessorError> {
        let now = self.clock.now_ms();
        self.expire_timed(now)
    }

    /// Emits progress reports and the heartbeat if their intervals are due.
    pub fn report_periodic(&mut self) -> Result<(), ProcessorError> {
        let now = self.clock.now_ms();
        self.report_due_progress(now)?;
        self.maybe_heartbeat(now);
        Ok(())
    }

    fn running_ids(&self) -> Vec<JobId> {
        self.pools.values().flat_map(|p| p.running().iter().copied()).collect()
    }

    fn expire_timed(&mut self, now: u64) -> Result<(), ProcessorError> {
        let mut due = Vec::new();
        for id in self.running_ids() {
            let job = &self.jobs[&id];
            if let (WorkloadParams::PrimeTimed(t), Some(start)) = (job.search.params(), job.started_at) {
                if now.saturating_sub(start) >= t.duration_ms {
                    due.push(id);
                }
            }
        }
        for id in due {
            self.jobs.get_mut(&id).unwrap().search.finish();
            self.complete(id, now)?;
        }
        Ok(())
    }

    fn report_due_progress(&mut self, now: u64) -> Result<(), ProcessorError> {
        let interval = self.config.progress_interval_ms;
        for id in self.running_ids() {
            let job = &self.jobs[&id];
            if now.saturating_sub(job.last_progress_at) >= interval {
                let fraction = job.search.progress(now - job.started_at.unwrap_or(now));
                self.report_progress(id, fraction)?;
                self.jobs.get_mut(&id).unwrap().last_progress_at = now;
            }
        }
        Ok(())
    }

    /// Publishes a PROGRESS message for a running job.
    pub fn report_progress(&self, job: JobId, fraction: f64) -> Result<(), ProcessorError> {
        let update = ProgressUpdate { job_id: job, fraction: fraction.clamp(0.0, 1.0), at: self.clock.now_ms() };
        self.publisher.publish(STATUS_QUEUE, Payload::Progress(update))?;
        Ok(())
    }

    fn maybe_heartbeat(&mut self, now: u64) {
        if self.heartbeats_paused {
            return;
        }
        if self.last_heartbeat.is_some_and(|t| now.saturating_sub(t) < self.config.heartbeat_interval_ms) {
            return;
        }
        if self.emit_heartbeat(now).is_ok() {
            self.last_heartbeat = Some(now);
        }
    }

    /// Publishes a HEARTBEAT with the current load. Failures are logged and
    /// left for the next interval.
    pub fn emit_heartbeat(&self, now: u64) -> Result<(), BusError> {
        let beat = HeartbeatPayload { processor: self.id, current_load: self.load(), timestamp: now };
        self.publisher.publish(STATUS_QUEUE, Payload::Heartbeat(beat)).map(drop).inspect_err(|e| {
            tracing::warn!(processor = %self.id, error = %e, "heartbeat not sent");
        })
    }
}
