//! Sender-initiated load sharing, kept as a comparison arm.
//!
//! Every job arrives at one node (the sender). Before handing the job over,
//! the sender polls each peer for its load, one peer at a time, and every
//! poll costs `per_query_latency_ms`. It then sends the job to the
//! least-loaded node, counting itself at no query cost. A node runs one
//! discovery at a time, so jobs that arrive together at the same node queue
//! up behind each other's discovery.
//!
//! With zero latency this reduces to a least-load argmin with smallest-id
//! tie-break, which is exactly what the scheduler does under
//! [`SchedulingPolicy::LeastLoad`](crate::model::SchedulingPolicy).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bus::{Broker, BusError, Consumer, DeliveryTag, Publisher, REQUESTS_QUEUE};
use crate::clock::SharedClock;
use crate::model::{JobId, JobRequest, JobStatus, Payload, ProcessorId};
use crate::repository::{RepoError, Repository};

pub const DEFAULT_RETRY_BACKOFF_MS: u64 = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct SenderConfig {
    pub per_query_latency_ms: u64,
    /// A node at or above this load refuses work. `None` accepts always.
    pub accept_threshold: Option<u32>,
    pub retry_backoff_ms: u64,
    /// Seeds the choice of arrival node per job.
    pub seed: u64,
}

impl Default for SenderConfig {
    fn default() -> Self {
        Self { per_query_latency_ms: 50, accept_threshold: None, retry_backoff_ms: DEFAULT_RETRY_BACKOFF_MS, seed: 0 }
    }
}

/// One node's answer to a load query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeLoad {
    pub id: ProcessorId,
    pub load: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SenderDecision {
    /// `None` when every node is at or over the accept threshold.
    pub target: Option<ProcessorId>,
    pub queries: u32,
    pub discovery_delay_ms: u64,
}

/// Time a sender spends polling its peers before it can place one job.
pub fn discovery_delay(nodes: usize, per_query_latency_ms: u64) -> u64 {
    nodes.saturating_sub(1) as u64 * per_query_latency_ms
}

/// Places one job from `sender` given every node's load.
///
/// # Panics
///
/// Panics when `nodes` is empty.
pub fn sender_dispatch(
    sender: ProcessorId,
    nodes: &[NodeLoad],
    per_query_latency_ms: u64,
    accept_threshold: Option<u32>,
) -> SenderDecision {
    assert!(!nodes.is_empty(), "sender_dispatch needs at least one node");
    let queries = nodes.iter().filter(|n| n.id != sender).count() as u32;
    let target = nodes
        .iter()
        .filter(|n| accept_threshold.is_none_or(|t| n.load < t))
        .min_by_key(|n| (n.load, n.id))
        .map(|n| n.id);
    SenderDecision { target, queries, discovery_delay_ms: queries as u64 * per_query_latency_ms }
}

#[derive(Clone, Debug)]
struct Pending {
    request: JobRequest,
    tag: DeliveryTag,
    sender: ProcessorId,
    ready_at: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RouterStats {
    pub forwarded: u64,
    pub retries: u64,
    pub queries: u64,
}

/// Drop-in replacement for the scheduler on the `requests` queue that places
/// jobs the sender-initiated way.
pub struct SenderRouter {
    repo: Arc<Repository>,
    broker: Arc<Broker>,
    requests: Consumer,
    publisher: Publisher,
    clock: SharedClock,
    config: SenderConfig,
    nodes: Vec<ProcessorId>,
    rng: ChaCha8Rng,
    /// When each node finishes its current discovery.
    free_at: BTreeMap<ProcessorId, u64>,
    pending: HashMap<JobId, Pending>,
    stats: RouterStats,
}

impl SenderRouter {
    pub fn new(
        broker: Arc<Broker>,
        repo: Arc<Repository>,
        nodes: Vec<ProcessorId>,
        config: SenderConfig,
    ) -> Result<Self, BusError> {
        assert!(!nodes.is_empty(), "sender-initiated routing needs at least one node");
        broker.ensure_queue(REQUESTS_QUEUE)?;
        let nodes: Vec<_> = nodes.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        Ok(Self {
            repo,
            requests: Consumer::new(broker.clone(), REQUESTS_QUEUE, "sender-router"),
            publisher: Publisher::new(broker.clone()),
            clock: broker.clock().clone(),
            broker,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            free_at: nodes.iter().map(|n| (*n, 0)).collect(),
            nodes,
            config,
            pending: HashMap::new(),
            stats: RouterStats::default(),
        })
    }

    pub fn stats(&self) -> RouterStats {
        self.stats
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn rebind(&mut self, broker: Arc<Broker>) {
        self.requests.rebind(broker.clone());
        self.publisher.rebind(broker.clone());
        self.broker = broker;
    }

    fn start_discovery(&mut self, node: ProcessorId, from: u64) -> u64 {
        let free = self.free_at.get_mut(&node).expect("known node");
        let ready = (*free).max(from) + discovery_delay(self.nodes.len(), self.config.per_query_latency_ms);
        *free = ready;
        ready
    }

    /// Takes new requests and places every job whose discovery is done.
    ///
    /// `local_load` gives each node's own count of admitted jobs; jobs already
    /// sent to a node but not yet picked up are added from its dispatch queue.
    pub fn step(&mut self, local_load: &BTreeMap<ProcessorId, u32>) -> Result<Vec<(JobId, ProcessorId)>, RouterError> {
        let now = self.clock.now_ms();
        self.intake(now)?;

        let mut ready: Vec<(u64, JobId)> =
            self.pending.values().filter(|p| p.ready_at <= now).map(|p| (p.ready_at, p.request.job_id)).collect();
        ready.sort_unstable();

        let mut placed = Vec::new();
        for (_, job) in ready {
            let loads = self
                .nodes
                .iter()
                .map(|&id| {
                    let queued = self.broker.visible_len(&id.dispatch_queue()).unwrap_or(0) as u32;
                    Ok(NodeLoad { id, load: local_load.get(&id).copied().unwrap_or(0) + queued })
                })
                .collect::<Result<Vec<_>, RouterError>>()?;
            let p = &self.pending[&job];
            let d = sender_dispatch(p.sender, &loads, self.config.per_query_latency_ms, self.config.accept_threshold);
            self.stats.queries += d.queries as u64;
            match d.target {
                Some(target) => {
                    let p = self.pending.remove(&job).expect("pending");
                    self.publisher.publish(&target.dispatch_queue(), Payload::JobRequest(p.request))?;
                    self.repo.try_schedule(job, target, now)?;
                    self.ack(p.tag)?;
                    self.stats.forwarded += 1;
                    placed.push((job, target));
                }
                None => {
                    let sender = p.sender;
                    let ready_at = self.start_discovery(sender, now + self.config.retry_backoff_ms);
                    self.pending.get_mut(&job).expect("pending").ready_at = ready_at;
                    self.stats.retries += 1;
                }
            }
        }
        Ok(placed)
    }

    fn intake(&mut self, now: u64) -> Result<(), RouterError> {
        while let Some(d) = self.requests.poll()? {
            let Payload::JobRequest(req) = d.message.body else {
                self.ack(d.delivery_tag)?;
                continue;
            };
            if let Some(p) = self.pending.get_mut(&req.job_id) {
                p.tag = d.delivery_tag;
                continue;
            }
            match self.repo.job(req.job_id).map(|j| j.status) {
                Some(JobStatus::Dispatched) => {}
                // not yet confirmed by the dispatcher; comes back later
                Some(JobStatus::Submitted) => continue,
                _ => {
                    self.ack(d.delivery_tag)?;
                    continue;
                }
            }
            let sender = self.nodes[self.rng.gen_range(0..self.nodes.len())];
            let ready_at = self.start_discovery(sender, now);
            self.pending.insert(req.job_id, Pending { request: req, tag: d.delivery_tag, sender, ready_at });
        }
        Ok(())
    }

    fn ack(&self, tag: DeliveryTag) -> Result<(), BusError> {
        match self.requests.ack(tag) {
            Err(BusError::ExpiredTag(_) | BusError::UnknownTag(_)) => Ok(()),
            r => r,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RouterError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Repo(#[from] RepoError),
}
