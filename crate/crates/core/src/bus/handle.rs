use std::sync::Arc;

use super::{Broker, BusError, Delivery, DeliveryTag};
use crate::model::{MsgId, Payload};

/// Write-only access to the broker.
#[derive(Clone, Debug)]
pub struct Publisher {
    broker: Arc<Broker>,
}

impl Publisher {
    pub fn new(broker: Arc<Broker>) -> Self {
        Self { broker }
    }

    pub fn publish(&self, queue: &str, payload: Payload) -> Result<MsgId, BusError> {
        self.broker.enqueue(queue, payload)
    }

    pub fn rebind(&mut self, broker: Arc<Broker>) {
        self.broker = broker;
    }
}

/// Read-and-ack access to a single queue.
#[derive(Clone, Debug)]
pub struct Consumer {
    broker: Arc<Broker>,
    queue: String,
    name: String,
    visibility_timeout_ms: u64,
}

impl Consumer {
    pub fn new(broker: Arc<Broker>, queue: impl Into<String>, name: impl Into<String>) -> Self {
        let visibility_timeout_ms = broker.config().visibility_timeout_ms;
        Self { broker, queue: queue.into(), name: name.into(), visibility_timeout_ms }
    }

    pub fn with_visibility_timeout(mut self, ms: u64) -> Self {
        self.visibility_timeout_ms = ms;
        self
    }

    pub fn queue(&self) -> &str {
        &self.queue
    }

    pub fn poll(&self) -> Result<Option<Delivery>, BusError> {
        self.broker.dequeue(&self.queue, &self.name, self.visibility_timeout_ms)
    }

    pub fn ack(&self, tag: DeliveryTag) -> Result<(), BusError> {
        self.broker.ack(&self.queue, tag)
    }

    pub fn visible_len(&self) -> Result<usize, BusError> {
        self.broker.visible_len(&self.queue)
    }

    pub fn rebind(&mut self, broker: Arc<Broker>) {
        self.broker = broker;
    }
}
