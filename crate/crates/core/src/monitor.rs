//! Status folding.
//!
//! The monitor drains the `status` queue into the repository. It holds a
//! consumer handle only, so it cannot publish anything: communication from
//! processors is strictly one-way.

use std::sync::Arc;

use thiserror::Error;

use crate::bus::{Broker, BusError, Consumer, Delivery, STATUS_QUEUE};
use crate::model::{Payload, ProcessorId};
use crate::repository::{Applied, RepoError, Repository};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Repo(#[from] RepoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Handled {
    Heartbeat { applied: bool },
    Status { applied: bool },
    Progress { applied: bool },
    DeadLetter,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MonitorStats {
    pub heartbeats: u64,
    pub statuses: u64,
    pub progress: u64,
    pub ignored: u64,
    pub dead_letters: u64,
}

pub struct Monitor {
    repo: Arc<Repository>,
    status: Consumer,
    liveness_window_ms: u64,
    stats: MonitorStats,
}

impl Monitor {
    pub fn new(broker: Arc<Broker>, repo: Arc<Repository>, liveness_window_ms: u64) -> Result<Self, BusError> {
        broker.ensure_queue(STATUS_QUEUE)?;
        Ok(Self {
            repo,
            status: Consumer::new(broker, STATUS_QUEUE, "monitor"),
            liveness_window_ms,
            stats: MonitorStats::default(),
        })
    }

    pub fn rebind(&mut self, broker: Arc<Broker>) {
        self.status.rebind(broker);
    }

    pub fn stats(&self) -> MonitorStats {
        self.stats
    }

    /// Writes one status message to the repository and acks it. A failed
    /// write leaves the delivery unacked so it is retried.
    pub fn handle_status_message(&mut self, delivery: &Delivery) -> Result<Handled, MonitorError> {
        let handled = self.apply(&delivery.message.body)?;
        self.status.ack(delivery.delivery_tag)?;
        Ok(handled)
    }

    /// The repository side of [`handle_status_message`], without the ack.
    /// Unknown jobs or processors count as ignored rather than failing.
    ///
    /// [`handle_status_message`]: Monitor::handle_status_message
    pub fn apply(&mut self, body: &Payload) -> Result<Handled, MonitorError> {
        let tolerate = |r: Result<bool, RepoError>| match r {
            Ok(b) => Ok(b),
            Err(RepoError::UnknownJob(_) | RepoError::UnknownProcessor(_) | RepoError::IllegalTransition { .. }) => {
                Ok(false)
            }
            Err(e) => Err(e),
        };
        let handled = match body {
            Payload::Heartbeat(h) => {
                self.stats.heartbeats += 1;
                let applied = tolerate(self.repo.update_processor_status(h.processor, h.current_load, h.timestamp))?;
                Handled::Heartbeat { applied }
            }
            Payload::JobStatus(s) => {
                self.stats.statuses += 1;
                let r = self.repo.apply_status(s).map(|a| matches!(a, Applied::Updated(_)));
                if let Err(RepoError::IllegalTransition { job, from, to }) = &r {
                    tracing::warn!(%job, %from, %to, "out-of-order status ignored");
                }
                Handled::Status { applied: tolerate(r)? }
            }
            Payload::Progress(p) => {
                self.stats.progress += 1;
                Handled::Progress { applied: tolerate(self.repo.set_progress(p.job_id, p.fraction))? }
            }
            Payload::JobRequest(_) => {
                self.stats.dead_letters += 1;
                tracing::warn!("job request on the status queue");
                return Ok(Handled::DeadLetter);
            }
        };
        if matches!(
            handled,
            Handled::Heartbeat { applied: false } | Handled::Status { applied: false } | Handled::Progress { applied: false }
        ) {
            self.stats.ignored += 1;
        }
        Ok(handled)
    }

    /// Drains every visible status message.
    pub fn poll(&mut self) -> Result<usize, MonitorError> {
        let mut n = 0;
        while let Some(d) = self.status.poll()? {
            self.handle_status_message(&d)?;
            n += 1;
        }
        Ok(n)
    }

    /// Availability of every registered processor, as the scheduler sees it.
    pub fn liveness_view(&self, now: u64) -> Vec<(ProcessorId, bool)> {
        liveness_view(&self.repo, now, self.liveness_window_ms)
    }
}

pub fn liveness_view(repo: &Repository, now: u64, liveness_window_ms: u64) -> Vec<(ProcessorId, bool)> {
    repo.processors().iter().map(|p| (p.id, p.is_available(now, liveness_window_ms))).collect()
}
