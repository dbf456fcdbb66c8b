//! Millisecond clocks shared by every component.
//!
//! Live runs use [`SystemClock`]; deterministic tests and experiments use
//! [`VirtualClock`], which only moves when the owner advances it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

/// Monotonic millisecond time source.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub type SharedClock = Arc<dyn Clock>;

/// A clock that advances only when told to.
#[derive(Clone, Debug, Default)]
pub struct VirtualClock {
    now: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new(start_ms: u64) -> Self {
        Self {
            now: Arc::new(AtomicU64::new(start_ms)),
        }
    }

    pub fn advance(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::AcqRel);
    }

    /// Moves the clock forward to `ms`. Never moves it backwards.
    pub fn advance_to(&self, ms: u64) {
        self.now.fetch_max(ms, Ordering::AcqRel);
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::Acquire)
    }
}

/// Wall-clock milliseconds elapsed since construction, plus a fixed start.
#[derive(Clone, Debug)]
pub struct SystemClock {
    origin: Instant,
    start_ms: u64,
}

impl SystemClock {
    pub fn new() -> Self {
        Self::starting_at(0)
    }

    /// Reads `start_ms` at construction and counts up from there.
    pub fn starting_at(start_ms: u64) -> Self {
        Self {
            origin: Instant::now(),
            start_ms,
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.start_ms + self.origin.elapsed().as_millis() as u64
    }
}
