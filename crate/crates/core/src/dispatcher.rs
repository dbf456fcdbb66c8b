//! Job submission.
//!
//! The dispatcher validates a request, records the job and publishes exactly
//! one JOB_REQUEST on `requests`. It has no view of the processor registry;
//! choosing a target is the scheduler's business.

use std::sync::Arc;

use thiserror::Error;

use crate::bus::{Broker, BusError, Publisher, REQUESTS_QUEUE};
use crate::clock::SharedClock;
use crate::model::{JobId, JobRequest, JobStatus, ParseError, Payload, Priority, SchedulingPolicy};
use crate::repository::{JobFilter, JobStore, RepoError};

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("unknown job definition `{0}`")]
    UnknownDefinition(String),
    #[error("priority {0} exceeds the configured maximum {1}")]
    PriorityOutOfRange(Priority, Priority),
    #[error(transparent)]
    InvalidPolicy(#[from] ParseError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    /// The job is recorded as SUBMITTED and flagged retriable.
    #[error("job {job} recorded but not queued: {source}")]
    Broker {
        job: JobId,
        #[source]
        source: BusError,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobRequestOptions {
    pub definition_id: String,
    pub priority: Priority,
    pub policy: SchedulingPolicy,
}

impl JobRequestOptions {
    pub fn new(definition_id: impl Into<String>, priority: Priority, policy: SchedulingPolicy) -> Self {
        Self { definition_id: definition_id.into(), priority, policy }
    }
}

#[derive(Clone, Debug)]
pub struct DispatcherConfig {
    pub max_priority: Priority,
}

impl Default for DispatcherConfig {
    fn default() -> Self {
        Self { max_priority: Priority::HIGH }
    }
}

pub struct Dispatcher {
    store: Arc<dyn JobStore>,
    publisher: Publisher,
    clock: SharedClock,
    config: DispatcherConfig,
}

impl Dispatcher {
    pub fn new(broker: Arc<Broker>, store: Arc<dyn JobStore>, config: DispatcherConfig) -> Result<Self, BusError> {
        broker.ensure_queue(REQUESTS_QUEUE)?;
        Ok(Self { store, clock: broker.clock().clone(), publisher: Publisher::new(broker), config })
    }

    pub fn rebind(&mut self, broker: Arc<Broker>) {
        self.publisher.rebind(broker);
    }

    fn validate(&self, options: &JobRequestOptions) -> Result<(), DispatchError> {
        if self.store.definition(&options.definition_id).is_none() {
            return Err(DispatchError::UnknownDefinition(options.definition_id.clone()));
        }
        if options.priority > self.config.max_priority {
            return Err(DispatchError::PriorityOutOfRange(options.priority, self.config.max_priority));
        }
        options.policy.validate()?;
        Ok(())
    }

    /// Records the job, publishes its request and marks it DISPATCHED.
    pub fn dispatch(&self, options: &JobRequestOptions) -> Result<JobId, DispatchError> {
        self.validate(options)?;
        let now = self.clock.now_ms();
        let job = self.store.create_job(&options.definition_id, options.priority, options.policy, now)?;
        self.publish(job.id, options, now)?;
        Ok(job.id)
    }

    fn publish(&self, id: JobId, options: &JobRequestOptions, now: u64) -> Result<(), DispatchError> {
        let req = JobRequest {
            job_id: id,
            definition_id: options.definition_id.clone(),
            priority: options.priority,
            policy: options.policy,
        };
        if let Err(source) = self.publisher.publish(REQUESTS_QUEUE, Payload::JobRequest(req)) {
            tracing::warn!(job = %id, error = %source, "request not queued; job left retriable");
            self.store.set_retriable(id, true)?;
            return Err(DispatchError::Broker { job: id, source });
        }
        self.store.update_job_status(id, JobStatus::Dispatched, now)?;
        Ok(())
    }

    /// Re-publishes jobs left SUBMITTED by an earlier broker failure.
    pub fn retry_submitted(&self) -> Result<Vec<JobId>, DispatchError> {
        let now = self.clock.now_ms();
        let mut done = Vec::new();
        for job in self.store.query_jobs(&JobFilter::all().status(JobStatus::Submitted)) {
            if !job.retriable {
                continue;
            }
            let options = JobRequestOptions::new(job.definition_id.clone(), job.priority, job.policy);
            self.publish(job.id, &options, now)?;
            self.store.set_retriable(job.id, false)?;
            done.push(job.id);
        }
        Ok(done)
    }
}
