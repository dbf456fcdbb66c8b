use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use crate::baseline::{SenderConfig, SenderRouter};
use crate::bus::{Broker, BrokerConfig};
use crate::clock::{SharedClock, SystemClock, VirtualClock};
use crate::dispatcher::{DispatchError, Dispatcher, DispatcherConfig, JobRequestOptions};
use crate::model::{JobId, ProcessorId};
use crate::monitor::Monitor;
use crate::processor::{Processor, ProcessorConfig};
use crate::repository::{JobFilter, Repository};
use crate::scheduler::{Scheduler, SchedulerConfig};

use super::HarnessError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClockMode {
    #[default]
    Virtual,
    Real,
}

impl FromStr for ClockMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "virtual" => Ok(ClockMode::Virtual),
            "real" => Ok(ClockMode::Real),
            _ => Err(HarnessError::Config(format!("unknown clock `{s}` (expected virtual or real)"))),
        }
    }
}

/// Per-processor sizing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcessorSpec {
    pub capacity: u32,
    pub cost_factor: f64,
}

impl ProcessorSpec {
    pub fn new(capacity: u32, cost_factor: f64) -> Self {
        Self { capacity, cost_factor }
    }
}

/// How requests get from the `requests` queue to a processor.
#[derive(Clone, Debug, PartialEq)]
pub enum Routing {
    Scheduler(SchedulerConfig),
    Sender(SenderConfig),
}

#[derive(Clone, Debug)]
pub struct ClusterConfig {
    pub processors: Vec<ProcessorSpec>,
    /// Id of the first processor; the rest are numbered consecutively.
    pub first_processor_id: ProcessorId,
    /// Template for every processor; capacity and cost come from `processors`.
    pub processor: ProcessorConfig,
    pub broker: BrokerConfig,
    /// Journal directory for the repository; `None` keeps it in memory.
    pub repo_dir: Option<PathBuf>,
    pub routing: Routing,
    pub liveness_window_ms: u64,
    /// Compute slices each processor runs per step.
    pub slices_per_tick: u64,
    /// Virtual milliseconds per step.
    pub tick_ms: u64,
    pub clock: ClockMode,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            processors: vec![ProcessorSpec::new(10, 1.0)],
            first_processor_id: ProcessorId(1),
            processor: ProcessorConfig::default(),
            broker: BrokerConfig::in_memory(),
            repo_dir: None,
            routing: Routing::Scheduler(SchedulerConfig::default()),
            liveness_window_ms: 1500,
            slices_per_tick: 1,
            tick_ms: 1,
            clock: ClockMode::Virtual,
        }
    }
}

enum Router {
    Scheduler(Scheduler),
    Sender(Box<SenderRouter>),
}

/// Every component in one process, advanced in lock-step.
///
/// One [`step`](Cluster::step) runs, in order: monitor drain, due arrivals,
/// routing, processor intake, monitor drain, progress and heartbeats, clock
/// advance, then compute slices and timed-job expiry at the new time. The
/// components still talk only through the broker and the repository.
pub struct Cluster {
    config: ClusterConfig,
    clock: SharedClock,
    virtual_clock: Option<VirtualClock>,
    broker: Arc<Broker>,
    repo: Arc<Repository>,
    dispatcher: Dispatcher,
    router: Router,
    monitor: Monitor,
    processors: Vec<Processor>,
    arrivals: VecDeque<(u64, JobRequestOptions)>,
    dispatched: Vec<JobId>,
    first_dispatch: Option<u64>,
    needs_retry: bool,
    crashes: u32,
}

impl Cluster {
    pub fn new(config: ClusterConfig) -> Result<Self, HarnessError> {
        if config.processors.is_empty() {
            return Err(HarnessError::Config("at least one processor is required".into()));
        }
        if config.tick_ms == 0 {
            return Err(HarnessError::Config("tick must be positive".into()));
        }
        let repo = Arc::new(match &config.repo_dir {
            Some(dir) => Repository::open(dir)?,
            None => Repository::in_memory(),
        });
        let (clock, virtual_clock): (SharedClock, _) = match config.clock {
            ClockMode::Virtual => {
                let v = VirtualClock::new(resume_time(&repo));
                (Arc::new(v.clone()), Some(v))
            }
            ClockMode::Real => (Arc::new(SystemClock::starting_at(resume_time(&repo))), None),
        };
        let broker = Arc::new(Broker::open(config.broker.clone(), clock.clone())?);

        let mut processors = Vec::with_capacity(config.processors.len());
        for (i, spec) in config.processors.iter().enumerate() {
            let id = ProcessorId(config.first_processor_id.0 + i as u32);
            let pc = ProcessorConfig {
                id: Some(id),
                capacity: spec.capacity,
                cost_factor: spec.cost_factor,
                ..config.processor.clone()
            };
            let p = if repo.processor(id).is_some() {
                Processor::attach(broker.clone(), repo.clone(), pc, id)?
            } else {
                Processor::start(broker.clone(), repo.clone(), pc)?
            };
            processors.push(p);
        }
        let router = match &config.routing {
            Routing::Scheduler(sc) => Router::Scheduler(Scheduler::new(broker.clone(), repo.clone(), sc.clone())?),
            Routing::Sender(sc) => Router::Sender(Box::new(SenderRouter::new(
                broker.clone(),
                repo.clone(),
                processors.iter().map(Processor::id).collect(),
                sc.clone(),
            )?)),
        };
        Ok(Self {
            dispatcher: Dispatcher::new(broker.clone(), repo.clone(), DispatcherConfig::default())?,
            monitor: Monitor::new(broker.clone(), repo.clone(), config.liveness_window_ms)?,
            router,
            processors,
            clock,
            virtual_clock,
            broker,
            repo,
            config,
            arrivals: VecDeque::new(),
            dispatched: Vec::new(),
            first_dispatch: None,
            needs_retry: false,
            crashes: 0,
        })
    }

    pub fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    pub fn repo(&self) -> &Arc<Repository> {
        &self.repo
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn processors(&self) -> &[Processor] {
        &self.processors
    }

    pub fn processor_mut(&mut self, id: ProcessorId) -> Option<&mut Processor> {
        self.processors.iter_mut().find(|p| p.id() == id)
    }

    pub fn dispatched(&self) -> &[JobId] {
        &self.dispatched
    }

    pub fn first_dispatch(&self) -> Option<u64> {
        self.first_dispatch
    }

    pub fn crashes(&self) -> u32 {
        self.crashes
    }

    /// Queues a submission to be dispatched once the clock reaches `at`.
    pub fn schedule_arrival(&mut self, at: u64, options: JobRequestOptions) {
        let pos = self.arrivals.partition_point(|(t, _)| *t <= at);
        self.arrivals.insert(pos, (at, options));
    }

    /// Dispatches immediately, outside the step loop.
    pub fn submit(&mut self, options: &JobRequestOptions) -> Result<JobId, HarnessError> {
        let now = self.now();
        match self.dispatcher.dispatch(options) {
            Ok(id) => {
                self.note_dispatch(id, now);
                Ok(id)
            }
            Err(DispatchError::Broker { job, source }) => {
                tracing::warn!(%job, error = %source, "dispatch deferred");
                self.note_dispatch(job, now);
                self.needs_retry = true;
                Ok(job)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn note_dispatch(&mut self, id: JobId, now: u64) {
        self.dispatched.push(id);
        self.first_dispatch.get_or_insert(now);
    }

    /// Advances the whole system by one tick.
    pub fn step(&mut self) -> Result<(), HarnessError> {
        self.advance(true)
    }

    fn advance(&mut self, route: bool) -> Result<(), HarnessError> {
        self.monitor.poll()?;

        let now = self.now();
        if self.needs_retry {
            self.needs_retry = false;
            self.dispatcher.retry_submitted()?;
        }
        while self.arrivals.front().is_some_and(|(t, _)| *t <= now) {
            let (_, options) = self.arrivals.pop_front().expect("front exists");
            self.submit(&options)?;
        }

        match &mut self.router {
            _ if !route => {}
            Router::Scheduler(s) => {
                s.poll()?;
            }
            Router::Sender(r) => {
                let loads: BTreeMap<_, _> = self.processors.iter().map(|p| (p.id(), p.load())).collect();
                r.step(&loads)?;
            }
        }

        for p in &mut self.processors {
            p.poll_dispatch()?;
        }
        self.monitor.poll()?;
        for p in &mut self.processors {
            p.report_periodic()?;
        }

        if let Some(v) = &self.virtual_clock {
            v.advance(self.config.tick_ms);
        }
        for p in &mut self.processors {
            p.compute(self.config.slices_per_tick)?;
            p.expire_due()?;
        }
        Ok(())
    }

    /// True once every registered processor has a heartbeat inside the
    /// liveness window.
    pub fn all_live(&self) -> bool {
        let live = self.repo.list_available_processors(self.now(), self.config.liveness_window_ms);
        self.processors.iter().all(|p| live.iter().any(|s| s.id == p.id()))
    }

    /// Drains pending status traffic and returns the processors the router
    /// would consider live if it ran now.
    pub fn live_processors(&mut self) -> Result<Vec<ProcessorId>, HarnessError> {
        self.monitor.poll()?;
        Ok(self
            .repo
            .list_available_processors(self.now(), self.config.liveness_window_ms)
            .into_iter()
            .map(|p| p.id)
            .collect())
    }

    /// Steps until every processor is visible to the scheduler. Requests
    /// already queued stay put until then, so none is aborted for lack of a
    /// live target while the processors are still starting.
    pub fn warm_up(&mut self, max_ticks: u64) -> Result<u64, HarnessError> {
        for i in 0..max_ticks {
            self.monitor.poll()?;
            if self.all_live() {
                return Ok(i);
            }
            self.advance(false)?;
        }
        Err(HarnessError::Timeout { ticks: max_ticks })
    }

    /// True when nothing is waiting to arrive and every dispatched job has
    /// reached a terminal state in the repository.
    pub fn settled(&self) -> bool {
        self.arrivals.is_empty()
            && self.dispatched.iter().all(|id| self.repo.job(*id).is_some_and(|j| j.status.is_terminal()))
    }

    /// Steps until settled. `on_step` runs before every step and may inject
    /// faults.
    pub fn run_until_settled<F>(&mut self, max_ticks: u64, mut on_step: F) -> Result<u64, HarnessError>
    where
        F: FnMut(&mut Cluster) -> Result<(), HarnessError>,
    {
        for i in 0..max_ticks {
            self.monitor.poll()?;
            if self.settled() {
                return Ok(i);
            }
            on_step(self)?;
            self.step()?;
        }
        Err(HarnessError::Timeout { ticks: max_ticks })
    }

    /// Drops the broker and brings it back from its logs, losing every lease.
    /// Each component is then pointed at the recovered broker.
    pub fn crash_broker(&mut self) -> Result<(), HarnessError> {
        if self.broker.storage_root().is_none() {
            return Err(HarnessError::Config("broker crash injection needs a durable broker".into()));
        }
        // components still hold the old instance until rebound below; it is
        // never written to again
        let recovered = Arc::new(Broker::open(self.broker.config().clone(), self.clock.clone())?);
        self.broker = recovered.clone();
        self.dispatcher.rebind(recovered.clone());
        self.monitor.rebind(recovered.clone());
        match &mut self.router {
            Router::Scheduler(s) => s.rebind(recovered.clone()),
            Router::Sender(r) => r.rebind(recovered.clone()),
        }
        for p in &mut self.processors {
            p.rebind(recovered.clone());
        }
        self.crashes += 1;
        tracing::info!(at = self.now(), "broker restarted from its logs");
        Ok(())
    }

    /// Stops or resumes a processor's heartbeats.
    pub fn pause_heartbeats(&mut self, id: ProcessorId, paused: bool) -> bool {
        match self.processor_mut(id) {
            Some(p) => {
                p.pause_heartbeats(paused);
                true
            }
            None => false,
        }
    }

    /// Completed, failed and aborted counts among dispatched jobs.
    pub fn terminal_count(&self) -> usize {
        self.repo
            .query_jobs(&JobFilter::all())
            .iter()
            .filter(|j| j.status.is_terminal() && self.dispatched.contains(&j.id))
            .count()
    }
}

/// A start time for a virtual clock that lies after every timestamp already
/// stored, so resumed runs never produce heartbeats older than recorded ones.
pub fn resume_time(repo: &Repository) -> u64 {
    let heartbeats = repo.processors().into_iter().filter_map(|p| p.last_heartbeat);
    let jobs = repo
        .query_jobs(&JobFilter::all())
        .into_iter()
        .flat_map(|j| [Some(j.submitted_at), j.started_at, j.finished_at])
        .flatten();
    heartbeats.chain(jobs).max().map_or(0, |t| t + 1)
}
