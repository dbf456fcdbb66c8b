//! Dispatcher/processor job processing.
//!
//! Jobs flow through an embedded durable broker: a [`Dispatcher`] records a
//! submission and queues a request, the [`Scheduler`] picks a live processor
//! by policy and forwards the request to that processor's dispatch queue, a
//! [`Processor`] runs it inside a priority worker pool, and the [`Monitor`]
//! folds status, progress and heartbeat messages back into the
//! [`Repository`]. Components never call each other directly.
//!
//! The [`harness`] module wires everything into one process under a virtual
//! or real clock and runs the reference experiments.

pub mod baseline;
pub mod bus;
pub mod clock;
pub mod dispatcher;
pub mod framing;
pub mod harness;
pub mod model;
pub mod monitor;
pub mod processor;
pub mod repository;
pub mod scheduler;
pub mod workload;

pub use bus::{Broker, BrokerConfig, BusError, Consumer, Delivery, DeliveryTag, Publisher};
pub use clock::{Clock, SharedClock, SystemClock, VirtualClock};
pub use dispatcher::{DispatchError, Dispatcher, DispatcherConfig, JobRequestOptions};
pub use model::{
    HeartbeatPayload, JobId, JobRecord, JobStatus, Message, MessageKind, Payload, Priority, ProcessorId,
    ProcessorInfo, SchedulingPolicy,
};
pub use monitor::Monitor;
pub use processor::{Processor, ProcessorConfig};
pub use repository::{JobDefinition, JobFilter, ProcessorSnapshot, Repository};
pub use scheduler::{select_target, Scheduler, SchedulerConfig, Selection};
pub use workload::{PrimeResult, PrimeSearch, WorkloadParams};
