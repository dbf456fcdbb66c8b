use std::collections::VecDeque;

use crate::model::{JobId, Priority};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Admission {
    Running,
    /// Queued behind a full pool; the value is the 1-based backlog position.
    Backlog(usize),
}

/// Fixed-capacity set of job slots sharing one compute weight.
#[derive(Clone, Debug)]
pub struct PriorityWorkerPool {
    priority: Priority,
    capacity: usize,
    weight: u32,
    running: Vec<JobId>,
    backlog: VecDeque<JobId>,
    cursor: usize,
}

impl PriorityWorkerPool {
    pub fn new(priority: Priority, capacity: u32, weight: u32) -> Self {
        assert!(capacity > 0, "pool capacity must be positive");
        assert!(weight > 0, "pool weight must be positive");
        Self {
            priority,
            capacity: capacity as usize,
            weight,
            running: Vec::new(),
            backlog: VecDeque::new(),
            cursor: 0,
        }
    }

    pub fn priority(&self) -> Priority {
        self.priority
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn weight(&self) -> u32 {
        self.weight
    }

    pub fn running(&self) -> &[JobId] {
        &self.running
    }

    pub fn backlog(&self) -> impl Iterator<Item = &JobId> {
        self.backlog.iter()
    }

    pub fn backlog_len(&self) -> usize {
        self.backlog.len()
    }

    pub fn load(&self) -> usize {
        self.running.len() + self.backlog.len()
    }

    pub fn contains(&self, job: JobId) -> bool {
        self.running.contains(&job) || self.backlog.contains(&job)
    }

    pub fn admit(&mut self, job: JobId) -> Admission {
        if self.running.len() < self.capacity {
            self.running.push(job);
            Admission::Running
        } else {
            self.backlog.push_back(job);
            Admission::Backlog(self.backlog.len())
        }
    }

    /// Removes a running job and returns the backlog head promoted into its
    /// slot, if any.
    pub fn release(&mut self, job: JobId) -> Option<JobId> {
        let idx = self.running.iter().position(|j| *j == job)?;
        self.running.remove(idx);
        if idx < self.cursor {
            self.cursor -= 1;
        }
        let next = self.backlog.pop_front()?;
        self.running.push(next);
        Some(next)
    }

    /// Round-robin over running jobs.
    pub fn next_slice(&mut self) -> Option<JobId> {
        if self.running.is_empty() {
            return None;
        }
        if self.cursor >= self.running.len() {
            self.cursor = 0;
        }
        let job = self.running[self.cursor];
        self.cursor += 1;
        Some(job)
    }
}
