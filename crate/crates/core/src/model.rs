//! Domain types shared by every component: identifiers, priorities, the job
//! lifecycle, scheduling policies and the message envelope.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::workload::PrimeResult;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("invalid priority `{0}`")]
    Priority(String),
    #[error("invalid processor id `{0}`")]
    ProcessorId(String),
    #[error("invalid scheduling policy `{0}`")]
    Policy(String),
    #[error("mixed alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("invalid job status `{0}`")]
    Status(String),
}

/// Identity of one submitted job. Allocated monotonically by the repository.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ordered priority level. Two levels are named; more are admitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Priority(pub u8);

impl Priority {
    pub const LOW: Priority = Priority(0);
    pub const HIGH: Priority = Priority(1);

    pub fn level(self) -> u8 {
        self.0
    }
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Priority::LOW => f.write_str("low"),
            Priority::HIGH => f.write_str("high"),
            Priority(n) => write!(f, "p{n}"),
        }
    }
}

impl FromStr for Priority {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "low" | "normal" => Ok(Priority::LOW),
            "high" => Ok(Priority::HIGH),
            other => other
                .strip_prefix('p')
                .unwrap_or(other)
                .parse::<u8>()
                .map(Priority)
                .map_err(|_| ParseError::Priority(s.to_string())),
        }
    }
}

/// Lifecycle of a job.
///
/// ```text
/// SUBMITTED -> DISPATCHED -> SCHEDULED -> IN_PROGRESS -> COMPLETED | FAILED
///                  |             |
///                  +-> ABORTED <-+
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobStatus {
    Submitted,
    Dispatched,
    Scheduled,
    InProgress,
    Completed,
    Failed,
    Aborted,
}

impl JobStatus {
    pub const ALL: [JobStatus; 7] = [
        JobStatus::Submitted,
        JobStatus::Dispatched,
        JobStatus::Scheduled,
        JobStatus::InProgress,
        JobStatus::Completed,
        JobStatus::Failed,
        JobStatus::Aborted,
    ];

    pub fn can_transition_to(self, next: JobStatus) -> bool {
        use JobStatus::*;
        matches!(
            (self, next),
            (Submitted, Dispatched)
                | (Dispatched, Scheduled)
                | (Scheduled, InProgress)
                | (InProgress, Completed)
                | (InProgress, Failed)
                | (Dispatched, Aborted)
                | (Scheduled, Aborted)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobStatus::Completed | JobStatus::Failed | JobStatus::Aborted
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Submitted => "SUBMITTED",
            JobStatus::Dispatched => "DISPATCHED",
            JobStatus::Scheduled => "SCHEDULED",
            JobStatus::InProgress => "IN_PROGRESS",
            JobStatus::Completed => "COMPLETED",
            JobStatus::Failed => "FAILED",
            JobStatus::Aborted => "ABORTED",
        }
    }
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobStatus {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        JobStatus::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| ParseError::Status(s.to_string()))
    }
}

/// Identity of a registered processor, rendered as `P<n>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcessorId(pub u32);

impl ProcessorId {
    /// Name of the processor's private dispatch queue.
    pub fn dispatch_queue(self) -> String {
        format!("dispatch.{self}")
    }
}

impl fmt::Display for ProcessorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

impl FromStr for ProcessorId {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let digits = t.strip_prefix(['P', 'p']).unwrap_or(t);
        digits
            .parse::<u32>()
            .map(ProcessorId)
            .map_err(|_| ParseError::ProcessorId(s.to_string()))
    }
}

impl Serialize for ProcessorId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProcessorId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Registration data for a processor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessorInfo {
    /// Explicit id, or `None` to let the registry assign the next free one.
    pub id: Option<ProcessorId>,
    pub pool_capacity_per_priority: u32,
    pub pool_count: u32,
    pub cost_factor: f64,
}

impl ProcessorInfo {
    pub fn new(capacity_per_priority: u32, cost_factor: f64) -> Self {
        Self {
            id: None,
            pool_capacity_per_priority: capacity_per_priority,
            pool_count: 2,
            cost_factor,
        }
    }

    pub fn with_id(mut self, id: ProcessorId) -> Self {
        self.id = Some(id);
        self
    }

    pub fn capacity_total(&self) -> u32 {
        self.pool_capacity_per_priority * self.pool_count
    }
}

pub const DEFAULT_MIXED_ALPHA: f64 = 0.5;

/// How the scheduler picks a target processor.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum SchedulingPolicy {
    #[default]
    LeastLoad,
    LeastCost,
    /// Weighted blend of normalized load and normalized cost; `alpha` weighs load.
    Mixed { alpha: f64 },
    /// Pin the job to one processor, bypassing scoring.
    Affinity(ProcessorId),
}

impl SchedulingPolicy {
    pub fn mixed(alpha: f64) -> Result<Self, ParseError> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(SchedulingPolicy::Mixed { alpha })
        } else {
            Err(ParseError::Alpha(alpha))
        }
    }

    pub fn validate(&self) -> Result<(), ParseError> {
        match *self {
            SchedulingPolicy::Mixed { alpha } if !(0.0..=1.0).contains(&alpha) => {
                Err(ParseError::Alpha(alpha))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SchedulingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulingPolicy::LeastLoad => f.write_str("least-load"),
            SchedulingPolicy::LeastCost => f.write_str("least-cost"),
            SchedulingPolicy::Mixed { alpha } => write!(f, "mixed:{alpha}"),
            SchedulingPolicy::Affinity(p) => write!(f, "affinity:{p}"),
        }
    }
}

impl FromStr for SchedulingPolicy {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        let (head, arg) = match t.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (t.as_str(), None),
        };
        match (head, arg) {
            ("least-load", None) => Ok(SchedulingPolicy::LeastLoad),
            ("least-cost", None) => Ok(SchedulingPolicy::LeastCost),
            ("mixed", None) => Ok(SchedulingPolicy::Mixed {
                alpha: DEFAULT_MIXED_ALPHA,
            }),
            ("mixed", Some(a)) => {
                let alpha = a
                    .parse::<f64>()
                    .map_err(|_| ParseError::Policy(s.to_string()))?;
                SchedulingPolicy::mixed(alpha)
            }
            ("affinity", Some(p)) => p
                .parse()
                .map(SchedulingPolicy::Affinity)
                .map_err(|_| ParseError::Policy(s.to_string())),
            _ => Err(ParseError::Policy(s.to_string())),
        }
    }
}

impl Serialize for SchedulingPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SchedulingPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A job's identity, options, lifecycle state and timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: JobId,
    pub definition_id: String,
    pub priority: Priority,
    pub policy: SchedulingPolicy,
    pub status: JobStatus,
    pub target: Option<ProcessorId>,
    pub submitted_at: u64,
    pub started_at: Option<u64>,
    pub finished_at: Option<u64>,
    pub wait_ms: Option<u64>,
    pub processing_ms: Option<u64>,
    pub total_ms: Option<u64>,
    pub result_payload: Option<PrimeResult>,
    pub latest_progress: Option<f64>,
    pub error: Option<String>,
    /// Set when the request could not be handed to the broker.
    pub retriable: bool,
}

impl JobRecord {
    pub fn new(
        id: JobId,
        definition_id: impl Into<String>,
        priority: Priority,
        policy: SchedulingPolicy,
        submitted_at: u64,
    ) -> Self {
        Self {
            id,
            definition_id: definition_id.into(),
            priority,
            policy,
            status: JobStatus::Submitted,
            target: None,
            submitted_at,
            started_at: None,
            finished_at: None,
            wait_ms: None,
            processing_ms: None,
            total_ms: None,
            result_payload: None,
            latest_progress: None,
            error: None,
            retriable: false,
        }
    }

    /// Applies a lifecycle transition at time `at`, deriving timing fields.
    ///
    /// Entering IN_PROGRESS fixes the wait time; entering COMPLETED or FAILED
    /// fixes processing time and `total = wait + processing`.
    pub fn transition(&mut self, next: JobStatus, at: u64) -> Result<(), JobStatus> {
        if !self.status.can_transition_to(next) {
            return Err(self.status);
        }
        match next {
            JobStatus::InProgress => {
                let at = at.max(self.submitted_at);
                self.started_at = Some(at);
                self.wait_ms = Some(at - self.submitted_at);
            }
            JobStatus::Completed | JobStatus::Failed => {
                let started = self.started_at.unwrap_or(self.submitted_at);
                let at = at.max(started);
                self.finished_at = Some(at);
                let processing = at - started;
                self.processing_ms = Some(processing);
                self.total_ms = Some(self.wait_ms.unwrap_or(0) + processing);
            }
            _ => {}
        }
        self.status = next;
        Ok(())
    }
}

pub type MsgId = String;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub job_id: JobId,
    pub definition_id: String,
    pub priority: Priority,
    pub policy: SchedulingPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusUpdate {
    pub job_id: JobId,
    pub status: JobStatus,
    pub at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub processor: Option<ProcessorId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<PrimeResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressUpdate {
    pub job_id: JobId,
    pub fraction: f64,
    pub at: u64,
}

/// Periodic one-way liveness report from a processor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatPayload {
    pub processor: ProcessorId,
    pub current_load: u32,
    pub timestamp: u64,
}

/// Message body; the variant fixes both `kind` and the payload schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Payload {
    JobRequest(JobRequest),
    JobStatus(StatusUpdate),
    Progress(ProgressUpdate),
    Heartbeat(HeartbeatPayload),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageKind {
    JobRequest,
    JobStatus,
    Progress,
    Heartbeat,
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::JobRequest(_) => MessageKind::JobRequest,
            Payload::JobStatus(_) => MessageKind::JobStatus,
            Payload::Progress(_) => MessageKind::Progress,
            Payload::Heartbeat(_) => MessageKind::Heartbeat,
        }
    }
}

/// Envelope carried by broker queues. Serialized as a JSON object with
/// exactly `msg_id`, `kind`, `created_at` and `payload`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub msg_id: MsgId,
    pub created_at: u64,
    #[serde(flatten)]
    pub body: Payload,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn priority_ordering_and_names() {
        assert!(Priority::HIGH > Priority::LOW);
        assert_eq!("high".parse::<Priority>().unwrap(), Priority::HIGH);
        assert_eq!("LOW".parse::<Priority>().unwrap(), Priority::LOW);
        assert_eq!("p7".parse::<Priority>().unwrap(), Priority(7));
        assert_eq!(Priority(7).to_string(), "p7");
        assert!("urgent".parse::<Priority>().is_err());
    }

    #[test]
    fn transition_table_is_exactly_the_lifecycle() {
        use JobStatus::*;
        let legal = [
            (Submitted, Dispatched),
            (Dispatched, Scheduled),
            (Scheduled, InProgress),
            (InProgress, Completed),
            (InProgress, Failed),
            (Dispatched, Aborted),
            (Scheduled, Aborted),
        ];
        for from in JobStatus::ALL {
            for to in JobStatus::ALL {
                assert_eq!(
                    from.can_transition_to(to),
                    legal.contains(&(from, to)),
                    "{from} -> {to}"
                );
            }
        }
    }

    #[test]
    fn timing_is_additive() {
        let mut job = JobRecord::new(JobId(1), "d", Priority::LOW, SchedulingPolicy::LeastLoad, 100);
        job.transition(JobStatus::Dispatched, 100).unwrap();
        job.transition(JobStatus::Scheduled, 120).unwrap();
        job.transition(JobStatus::InProgress, 500).unwrap();
        assert_eq!(job.wait_ms, Some(400));
        job.transition(JobStatus::Completed, 1234).unwrap();
        assert_eq!(job.processing_ms, Some(734));
        assert_eq!(job.total_ms, Some(1134));
        assert_eq!(job.transition(JobStatus::Failed, 2000), Err(JobStatus::Completed));
    }

    #[test]
    fn completed_before_in_progress_is_rejected() {
        let mut job = JobRecord::new(JobId(1), "d", Priority::LOW, SchedulingPolicy::LeastLoad, 0);
        assert_eq!(job.transition(JobStatus::Completed, 5), Err(JobStatus::Submitted));
        assert_eq!(job.status, JobStatus::Submitted);
    }

    #[test]
    fn policy_strings() {
        for s in ["least-load", "least-cost", "mixed:0.25", "affinity:P3"] {
            let p: SchedulingPolicy = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert_eq!(
            "mixed".parse::<SchedulingPolicy>().unwrap(),
            SchedulingPolicy::Mixed { alpha: 0.5 }
        );
        assert_eq!(
            "mixed:1.5".parse::<SchedulingPolicy>(),
            Err(ParseError::Alpha(1.5))
        );
        assert!("affinity:".parse::<SchedulingPolicy>().is_err());
        assert!("fastest".parse::<SchedulingPolicy>().is_err());
    }

    #[test]
    fn message_wire_fields() {
        let msg = Message {
            msg_id: "m-1".into(),
            created_at: 42,
            body: Payload::Heartbeat(HeartbeatPayload {
                processor: ProcessorId(1),
                current_load: 3,
                timestamp: 40,
            }),
        };
        let v: serde_json::Value = serde_json::to_value(&msg).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["created_at", "kind", "msg_id", "payload"]);
        assert_eq!(obj["kind"], "HEARTBEAT");
        assert_eq!(obj["payload"]["processor"], "P1");
        let back: Message = serde_json::from_value(v).unwrap();
        assert_eq!(back, msg);
    }
}
