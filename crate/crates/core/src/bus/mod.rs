//! Embedded durable message broker.
//!
//! Named FIFO queues with at-least-once delivery. A dequeued message is leased
//! to one consumer for a visibility timeout; unless acked before the lease
//! runs out it becomes visible again with a higher attempt number.
//!
//! Durable queues live in `<storage_root>/<queue>.qlog`, one framed record per
//! enqueue and one tombstone record (`{"ack": "<msg_id>"}`) per ack. Lease
//! state is never persisted, so recovery makes every unacked message visible.

mod handle;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SharedClock;
use crate::framing::{LogFile, SkipReason};
use crate::model::{Message, MsgId, Payload};

// Shared by every broker in the process: a tag handed out before a restart
// must never name a different message on the recovered instance.
static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

pub use handle::{Consumer, Publisher};

pub const REQUESTS_QUEUE: &str = "requests";
pub const STATUS_QUEUE: &str = "status";
pub const LOG_EXTENSION: &str = "qlog";

#[derive(Debug, Error)]
pub enum BusError {
    #[error("queue `{0}` already exists")]
    DuplicateQueue(String),
    #[error("unknown queue `{0}`")]
    UnknownQueue(String),
    #[error("unknown delivery tag {0}")]
    UnknownTag(u64),
    #[error("delivery tag {0} expired; the message was redelivered")]
    ExpiredTag(u64),
    #[error("invalid queue name `{0}`")]
    InvalidName(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("message encoding failed: {0}")]
    Codec(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BusError + '_ {
    move |source| BusError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeliveryTag(pub u64);

/// One leased copy of a message.
#[derive(Clone, Debug, PartialEq)]
pub struct Delivery {
    pub message: Message,
    pub delivery_tag: DeliveryTag,
    /// 1 on first delivery, incremented on every redelivery.
    pub attempt: u32,
}

#[derive(Clone, Debug)]
pub struct BrokerConfig {
    /// Directory for queue logs; `None` keeps everything in memory.
    pub storage_root: Option<PathBuf>,
    /// Durability for queues created through [`Broker::ensure_queue`].
    pub durable_by_default: bool,
    /// fsync after each write instead of handing data to the OS only.
    pub sync: bool,
    pub visibility_timeout_ms: u64,
    pub poll_interval_ms: u64,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            storage_root: None,
            durable_by_default: true,
            sync: false,
            visibility_timeout_ms: 30_000,
            poll_interval_ms: 10,
        }
    }
}

impl BrokerConfig {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn durable(root: impl Into<PathBuf>) -> Self {
        Self { storage_root: Some(root.into()), ..Self::default() }
    }
}

/// Records skipped while replaying one queue log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueueRecovery {
    pub queue: String,
    pub recovered: usize,
    pub skipped_offsets: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecoveryReport {
    pub queues: Vec<QueueRecovery>,
}

impl RecoveryReport {
    pub fn skipped(&self) -> usize {
        self.queues.iter().map(|q| q.skipped_offsets.len()).sum()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tombstone {
    ack: MsgId,
}

#[derive(Debug)]
struct Lease {
    tag: DeliveryTag,
    until: u64,
}

#[derive(Debug)]
struct Entry {
    message: Message,
    attempt: u32,
    lease: Option<Lease>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TagState {
    Live,
    Acked,
    Superseded,
}

#[derive(Debug)]
struct Queue {
    entries: VecDeque<Entry>,
    log: Option<LogFile>,
    tags: HashMap<DeliveryTag, (MsgId, TagState)>,
}

impl Queue {
    fn new(log: Option<LogFile>) -> Self {
        Self { entries: VecDeque::new(), log, tags: HashMap::new() }
    }
}

/// Snapshot of one queued message for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct QueuedMessage {
    pub message: Message,
    pub attempt: u32,
    pub in_flight: bool,
}

pub struct Broker {
    clock: SharedClock,
    config: BrokerConfig,
    queues: RwLock<BTreeMap<String, Arc<Mutex<Queue>>>>,
    next_msg: AtomicU64,
    recovery: RecoveryReport,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker")
            .field("storage_root", &self.config.storage_root)
            .field("queues", &self.queue_names())
            .finish()
    }
}

fn validate_name(name: &str) -> Result<(), BusError> {
    let ok = !name.is_empty()
        && name.len() <= 200
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_'));
    if ok {
        Ok(())
    } else {
        Err(BusError::InvalidName(name.to_string()))
    }
}

fn msg_seq(id: &str) -> Option<u64> {
    id.strip_prefix("m-")?.parse().ok()
}

impl Broker {
    /// Opens a broker. With a storage root, every `*.qlog` file under it is
    /// replayed; see [`Broker::recover`].
    pub fn open(config: BrokerConfig, clock: SharedClock) -> Result<Self, BusError> {
        let mut broker = Broker {
            clock,
            config,
            queues: RwLock::new(BTreeMap::new()),
            next_msg: AtomicU64::new(1),
            recovery: RecoveryReport::default(),
        };
        if let Some(root) = broker.config.storage_root.clone() {
            fs::create_dir_all(&root).map_err(io_err(&root))?;
            broker.replay(&root)?;
        }
        Ok(broker)
    }

    /// Restores every durable queue under `storage_root`. Unacked messages are
    /// visible again in their original order; corrupt records are skipped and
    /// listed in [`Broker::recovery_report`].
    pub fn recover(
        storage_root: impl Into<PathBuf>,
        clock: SharedClock,
    ) -> Result<Self, BusError> {
        Self::open(BrokerConfig::durable(storage_root), clock)
    }

    fn replay(&mut self, root: &Path) -> Result<(), BusError> {
        let mut logs: Vec<(String, PathBuf)> = fs::read_dir(root)
            .map_err(io_err(root))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == LOG_EXTENSION))
            .filter_map(|p| {
                let name = p.file_stem()?.to_str()?.to_string();
                Some((name, p))
            })
            .collect();
        logs.sort();

        let mut max_seq = 0;
        let queues = self.queues.get_mut().unwrap();
        for (name, path) in logs {
            let (log, scan) =
                LogFile::open_and_scan(&path, self.config.sync).map_err(io_err(&path))?;
            let mut report = QueueRecovery { queue: name.clone(), ..Default::default() };
            let mut live: Vec<Message> = Vec::new();
            for skip in &scan.skipped {
                tracing::warn!(
                    queue = %name,
                    offset = skip.offset,
                    truncated = skip.reason == SkipReason::Truncated,
                    "skipping unreadable queue record"
                );
                report.skipped_offsets.push(skip.offset);
            }
            for (offset, body) in scan.records {
                if let Ok(t) = serde_json::from_slice::<Tombstone>(&body) {
                    live.retain(|m| m.msg_id != t.ack);
                    if let Some(n) = msg_seq(&t.ack) {
                        max_seq = max_seq.max(n);
                    }
                } else if let Ok(m) = serde_json::from_slice::<Message>(&body) {
                    if let Some(n) = msg_seq(&m.msg_id) {
                        max_seq = max_seq.max(n);
                    }
                    live.push(m);
                } else {
                    tracing::warn!(queue = %name, offset, "skipping undecodable queue record");
                    report.skipped_offsets.push(offset);
                }
            }
            report.skipped_offsets.sort_unstable();
            report.recovered = live.len();
            let mut q = Queue::new(Some(log));
            q.entries = live
                .into_iter()
                .map(|message| Entry { message, attempt: 0, lease: None })
                .collect();
            queues.insert(name, Arc::new(Mutex::new(q)));
            self.recovery.queues.push(report);
        }
        self.next_msg = AtomicU64::new(max_seq + 1);
        Ok(())
    }

    pub fn recovery_report(&self) -> &RecoveryReport {
        &self.recovery
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn storage_root(&self) -> Option<&Path> {
        self.config.storage_root.as_deref()
    }

    /// Creates an empty queue. Durable queues need a storage root.
    pub fn create_queue(&self, name: &str, durable: bool) -> Result<(), BusError> {
        validate_name(name)?;
        let mut queues = self.queues.write().unwrap();
        if queues.contains_key(name) {
            return Err(BusError::DuplicateQueue(name.to_string()));
        }
        let log = match (&self.config.storage_root, durable) {
            (Some(root), true) => {
                let path = root.join(format!("{name}.{LOG_EXTENSION}"));
                Some(LogFile::create(&path, self.config.sync).map_err(io_err(&path))?)
            }
            _ => None,
        };
        queues.insert(name.to_string(), Arc::new(Mutex::new(Queue::new(log))));
        Ok(())
    }

    /// Creates the queue with the default durability unless it already exists.
    pub fn ensure_queue(&self, name: &str) -> Result<(), BusError> {
        match self.create_queue(name, self.config.durable_by_default) {
            Ok(()) | Err(BusError::DuplicateQueue(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub fn has_queue(&self, name: &str) -> bool {
        self.queues.read().unwrap().contains_key(name)
    }

    pub fn queue_names(&self) -> Vec<String> {
        self.queues.read().unwrap().keys().cloned().collect()
    }

    fn queue(&self, name: &str) -> Result<Arc<Mutex<Queue>>, BusError> {
        self.queues
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| BusError::UnknownQueue(name.to_string()))
    }

    /// Appends a message, persisting it first when the queue is durable.
    pub fn enqueue(&self, queue: &str, payload: Payload) -> Result<MsgId, BusError> {
        let q = self.queue(queue)?;
        let mut q = q.lock().unwrap();
        let msg_id = format!("m-{}", self.next_msg.fetch_add(1, Ordering::Relaxed));
        let message = Message { msg_id: msg_id.clone(), created_at: self.clock.now_ms(), body: payload };
        if let Some(log) = q.log.as_mut() {
            let bytes = serde_json::to_vec(&message)?;
            let path = log.path().to_path_buf();
            log.append(&bytes).map_err(io_err(&path))?;
        }
        q.entries.push_back(Entry { message, attempt: 0, lease: None });
        Ok(msg_id)
    }

    /// Leases the oldest visible message to `consumer` for `visibility_timeout_ms`.
    pub fn dequeue(
        &self,
        queue: &str,
        consumer: &str,
        visibility_timeout_ms: u64,
    ) -> Result<Option<Delivery>, BusError> {
        let q = self.queue(queue)?;
        let mut q = q.lock().unwrap();
        let now = self.clock.now_ms();
        let Some(idx) = q
            .entries
            .iter()
            .position(|e| e.lease.as_ref().is_none_or(|l| l.until <= now))
        else {
            return Ok(None);
        };
        let tag = DeliveryTag(NEXT_TAG.fetch_add(1, Ordering::Relaxed));
        let (old_tag, delivery) = {
            let entry = &mut q.entries[idx];
            let old = entry.lease.take().map(|l| l.tag);
            entry.attempt += 1;
            entry.lease = Some(Lease { tag, until: now.saturating_add(visibility_timeout_ms) });
            (
                old,
                Delivery { message: entry.message.clone(), delivery_tag: tag, attempt: entry.attempt },
            )
        };
        if let Some(old) = old_tag {
            if let Some(state) = q.tags.get_mut(&old) {
                state.1 = TagState::Superseded;
            }
        }
        tracing::trace!(queue, consumer, tag = tag.0, attempt = delivery.attempt, "leased");
        q.tags.insert(tag, (delivery.message.msg_id.clone(), TagState::Live));
        Ok(Some(delivery))
    }

    /// Permanently removes a leased message. Acking the same tag twice is a
    /// no-op; a tag whose message was since redelivered is rejected.
    pub fn ack(&self, queue: &str, tag: DeliveryTag) -> Result<(), BusError> {
        let q = self.queue(queue)?;
        let mut q = q.lock().unwrap();
        let (msg_id, state) = q.tags.get(&tag).cloned().ok_or(BusError::UnknownTag(tag.0))?;
        match state {
            TagState::Acked => return Ok(()),
            TagState::Superseded => return Err(BusError::ExpiredTag(tag.0)),
            TagState::Live => {}
        }
        let idx = q
            .entries
            .iter()
            .position(|e| e.message.msg_id == msg_id)
            .ok_or(BusError::UnknownTag(tag.0))?;
        if let Some(log) = q.log.as_mut() {
            let bytes = serde_json::to_vec(&Tombstone { ack: msg_id })?;
            let path = log.path().to_path_buf();
            log.append(&bytes).map_err(io_err(&path))?;
        }
        q.entries.remove(idx);
        q.tags.insert(tag, (String::new(), TagState::Acked));
        Ok(())
    }

    /// Messages not yet acked, visible or leased.
    pub fn len(&self, queue: &str) -> Result<usize, BusError> {
        Ok(self.queue(queue)?.lock().unwrap().entries.len())
    }

    pub fn is_empty(&self, queue: &str) -> Result<bool, BusError> {
        Ok(self.len(queue)? == 0)
    }

    /// Messages a `dequeue` could hand out right now.
    pub fn visible_len(&self, queue: &str) -> Result<usize, BusError> {
        let now = self.clock.now_ms();
        let q = self.queue(queue)?;
        let q = q.lock().unwrap();
        Ok(q.entries
            .iter()
            .filter(|e| e.lease.as_ref().is_none_or(|l| l.until <= now))
            .count())
    }

    /// Every unacked message in queue order.
    pub fn messages(&self, queue: &str) -> Result<Vec<QueuedMessage>, BusError> {
        let now = self.clock.now_ms();
        let q = self.queue(queue)?;
        let q = q.lock().unwrap();
        Ok(q.entries
            .iter()
            .map(|e| QueuedMessage {
                message: e.message.clone(),
                attempt: e.attempt,
                in_flight: e.lease.as_ref().is_some_and(|l| l.until > now),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;
