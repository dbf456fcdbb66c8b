//! Target selection and request forwarding.
//!
//! The scheduler consumes `requests`, picks a live processor according to the
//! job's [`SchedulingPolicy`] and forwards the request to `dispatch.<target>`.
//! Selection is a full argmin over the live candidates with the smallest
//! processor id winning ties.

use std::cmp::Ordering;
use std::sync::Arc;

use thiserror::Error;

use crate::bus::{Broker, BusError, Consumer, Delivery, Publisher, REQUESTS_QUEUE};
use crate::clock::SharedClock;
use crate::model::{JobId, JobRequest, JobStatus, Payload, ProcessorId, SchedulingPolicy};
use crate::repository::{ProcessorSnapshot, RepoError, Repository};

const SCORE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Repo(#[from] RepoError),
}

/// Normalized terms behind a mixed-mode decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetScore {
    pub processor: ProcessorId,
    /// `current_load / capacity_total`
    pub load_term: f64,
    /// `cost_factor / max cost among candidates` (0 when every cost is 0)
    pub cost_term: f64,
    /// `alpha * load_term + (1 - alpha) * cost_term`
    pub mixed: f64,
}

pub fn score(candidate: &ProcessorSnapshot, max_cost: f64, alpha: f64) -> TargetScore {
    let load_term = candidate.current_load as f64 / candidate.capacity_total.max(1) as f64;
    let cost_term = if max_cost > 0.0 { candidate.cost_factor / max_cost } else { 0.0 };
    TargetScore {
        processor: candidate.id,
        load_term,
        cost_term,
        mixed: alpha * load_term + (1.0 - alpha) * cost_term,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Target(ProcessorId),
    NoTarget,
}

impl Selection {
    pub fn target(self) -> Option<ProcessorId> {
        match self {
            Selection::Target(p) => Some(p),
            Selection::NoTarget => None,
        }
    }
}

fn float_cmp(a: f64, b: f64) -> Ordering {
    let scale = 1f64.max(a.abs()).max(b.abs());
    if (a - b).abs() <= SCORE_EPSILON * scale {
        Ordering::Equal
    } else {
        a.total_cmp(&b)
    }
}

fn argmin_by<F>(candidates: &[ProcessorSnapshot], mut cmp: F) -> Selection
where
    F: FnMut(&ProcessorSnapshot, &ProcessorSnapshot) -> Ordering,
{
    candidates
        .iter()
        .min_by(|a, b| cmp(a, b).then(a.id.cmp(&b.id)))
        .map_or(Selection::NoTarget, |p| Selection::Target(p.id))
}

/// Picks a target among already-live `candidates`.
pub fn select_target(policy: &SchedulingPolicy, candidates: &[ProcessorSnapshot]) -> Selection {
    match *policy {
        SchedulingPolicy::LeastLoad => argmin_by(candidates, |a, b| a.current_load.cmp(&b.current_load)),
        SchedulingPolicy::LeastCost => {
            argmin_by(candidates, |a, b| a.cost_factor.total_cmp(&b.cost_factor))
        }
        SchedulingPolicy::Mixed { alpha } => {
            let max_cost = candidates.iter().map(|c| c.cost_factor).fold(0.0, f64::max);
            argmin_by(candidates, |a, b| {
                float_cmp(score(a, max_cost, alpha).mixed, score(b, max_cost, alpha).mixed)
            })
        }
        SchedulingPolicy::Affinity(p) => {
            if candidates.iter().any(|c| c.id == p) {
                Selection::Target(p)
            } else {
                Selection::NoTarget
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerConfig {
    pub liveness_window_ms: u64,
    /// Fall back to least-load when an affinity target is down.
    pub affinity_fallback: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { liveness_window_ms: 1500, affinity_fallback: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleOutcome {
    Forwarded { job: JobId, target: ProcessorId },
    Aborted(JobId),
    /// The job was already scheduled or finished; the delivery was dropped.
    Duplicate(JobId),
    /// Not a job request, or the job is unknown; acked and dropped.
    Rejected,
    /// The job is not yet marked DISPATCHED; left unacked for redelivery.
    Deferred(JobId),
}

pub struct Scheduler {
    repo: Arc<Repository>,
    requests: Consumer,
    publisher: Publisher,
    clock: SharedClock,
    config: SchedulerConfig,
}

impl Scheduler {
    pub fn new(broker: Arc<Broker>, repo: Arc<Repository>, config: SchedulerConfig) -> Result<Self, SchedulerError> {
        broker.ensure_queue(REQUESTS_QUEUE)?;
        Ok(Self {
            repo,
            requests: Consumer::new(broker.clone(), REQUESTS_QUEUE, "scheduler"),
            publisher: Publisher::new(broker.clone()),
            clock: broker.clock().clone(),
            config,
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn rebind(&mut self, broker: Arc<Broker>) {
        self.requests.rebind(broker.clone());
        self.publisher.rebind(broker);
    }

    /// Live candidates as of now.
    pub fn candidates(&self) -> Vec<ProcessorSnapshot> {
        self.repo.list_available_processors(self.clock.now_ms(), self.config.liveness_window_ms)
    }

    fn choose(&self, policy: &SchedulingPolicy) -> Selection {
        let candidates = self.candidates();
        match select_target(policy, &candidates) {
            Selection::NoTarget
                if self.config.affinity_fallback && matches!(policy, SchedulingPolicy::Affinity(_)) =>
            {
                select_target(&SchedulingPolicy::LeastLoad, &candidates)
            }
            s => s,
        }
    }

    /// Handles one request delivery. The delivery is acked only once the
    /// outcome is durable; on error it stays leased and will be redelivered.
    pub fn schedule(&self, delivery: &Delivery) -> Result<ScheduleOutcome, SchedulerError> {
        let Payload::JobRequest(req) = &delivery.message.body else {
            tracing::warn!(msg = %delivery.message.msg_id, "non-request message on requests queue");
            self.requests.ack(delivery.delivery_tag)?;
            return Ok(ScheduleOutcome::Rejected);
        };
        let Some(job) = self.repo.job(req.job_id) else {
            tracing::warn!(job = %req.job_id, "request for unknown job");
            self.requests.ack(delivery.delivery_tag)?;
            return Ok(ScheduleOutcome::Rejected);
        };
        if job.status == JobStatus::Submitted {
            // the dispatcher has published but not yet confirmed; leave the
            // lease to expire so the request comes back later
            return Ok(ScheduleOutcome::Deferred(job.id));
        }
        if job.status != JobStatus::Dispatched {
            self.requests.ack(delivery.delivery_tag)?;
            return Ok(ScheduleOutcome::Duplicate(job.id));
        }
        let now = self.clock.now_ms();
        let outcome = match self.choose(&req.policy) {
            Selection::NoTarget => {
                self.repo.update_job_status(job.id, JobStatus::Aborted, now)?;
                tracing::info!(job = %job.id, policy = %req.policy, "no live target, job aborted");
                ScheduleOutcome::Aborted(job.id)
            }
            Selection::Target(target) => {
                self.forward(req, target, now)?;
                ScheduleOutcome::Forwarded { job: job.id, target }
            }
        };
        self.requests.ack(delivery.delivery_tag)?;
        Ok(outcome)
    }

    /// Publishes to the target's queue, then claims the job. A lost claim
    /// leaves a stray copy that the processor drops.
    fn forward(&self, req: &JobRequest, target: ProcessorId, now: u64) -> Result<(), SchedulerError> {
        self.publisher.publish(&target.dispatch_queue(), Payload::JobRequest(req.clone()))?;
        if !self.repo.try_schedule(req.job_id, target, now)? {
            tracing::debug!(job = %req.job_id, "job claimed elsewhere after forwarding");
        }
        Ok(())
    }

    /// Drains every visible request.
    pub fn poll(&self) -> Result<Vec<ScheduleOutcome>, SchedulerError> {
        let mut out = Vec::new();
        while let Some(d) = self.requests.poll()? {
            out.push(self.schedule(&d)?);
        }
        Ok(out)
    }
}
