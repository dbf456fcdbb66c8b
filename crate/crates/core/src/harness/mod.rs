//! In-process wiring and the reference experiments.
//!
//! [`Cluster`] assembles the dispatcher, scheduler (or the sender-initiated
//! router), processors and monitor over one broker and repository. The
//! `run_*` functions build a cluster from an [`ExperimentConfig`], submit a
//! seeded job stream and collect an [`ExperimentReport`].
//!
//! Under the virtual clock every run is a pure function of its configuration,
//! so two runs with the same seed emit byte-identical CSV.

mod cluster;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::baseline::{RouterError, SenderConfig};
use crate::bus::{BrokerConfig, BusError};
use crate::dispatcher::{DispatchError, JobRequestOptions};
use crate::model::{Priority, SchedulingPolicy};
use crate::monitor::MonitorError;
use crate::processor::{ProcessorConfig, ProcessorError};
use crate::repository::{JobDefinition, JobFilter, RepoError};
use crate::scheduler::{SchedulerConfig, SchedulerError};
use crate::workload::{WorkloadKind, WorkloadParams};

pub use cluster::{resume_time, ClockMode, Cluster, ClusterConfig, ProcessorSpec, Routing};
pub use report::{
    emit_report, fmt_mean, read_jobs_csv, read_summary_csv, Aggregate, ExperimentReport, InvalidJob, JobRow,
    SummaryRow, JOBS_CSV, JOBS_HEADER, SUMMARY_CSV, SUMMARY_HEADER,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run did not settle within {ticks} ticks")]
    Timeout { ticks: u64 },
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Processor(#[from] ProcessorError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed report: {0}")]
    Parse(String),
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub processors: Vec<ProcessorSpec>,
    pub jobs_low: u32,
    pub jobs_high: u32,
    pub workload: WorkloadParams,
    pub policy: SchedulingPolicy,
    pub clock: ClockMode,
    pub seed: u64,
    /// Pool weights, slice budget and reporting intervals for every processor.
    pub processor: ProcessorConfig,
    pub broker: BrokerConfig,
    pub scheduler: SchedulerConfig,
    pub slices_per_tick: u64,
    /// Gap between consecutive submissions; 0 submits the whole stream at once.
    pub arrival_spacing_ms: u64,
    /// Restart the broker from its logs this many ms after the first dispatch.
    pub crash_at_ms: Option<u64>,
    pub max_ticks: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::experiment1()
    }
}

impl ExperimentConfig {
    pub const DEFAULT_SEED: u64 = 42;

    /// One processor, 20 LOW + 20 HIGH jobs each counting 20,000 primes.
    pub fn experiment1() -> Self {
        Self {
            processors: vec![ProcessorSpec::new(10, 1.0)],
            jobs_low: 20,
            jobs_high: 20,
            workload: WorkloadParams::count(20_000).expect("positive"),
            policy: SchedulingPolicy::LeastLoad,
            clock: ClockMode::Virtual,
            seed: Self::DEFAULT_SEED,
            processor: ProcessorConfig::default(),
            broker: BrokerConfig::in_memory(),
            scheduler: SchedulerConfig::default(),
            slices_per_tick: 1,
            arrival_spacing_ms: 0,
            crash_at_ms: None,
            max_ticks: 5_000_000,
        }
    }

    /// As experiment 1, but every job counts primes for 2 s.
    pub fn experiment2() -> Self {
        Self { workload: WorkloadParams::timed(2_000).expect("positive"), ..Self::experiment1() }
    }

    /// Four identical nodes fed one job every 50 ms, for the sender-initiated
    /// comparison.
    ///
    /// The stream is spaced rather than submitted at once: with a burst, the
    /// discovery delays of the baseline merely stagger job starts, which eases
    /// pool contention and masks the overhead being measured.
    pub fn comparison() -> Self {
        Self {
            processors: vec![ProcessorSpec::new(10, 1.0); 4],
            arrival_spacing_ms: Self::COMPARISON_SPACING_MS,
            ..Self::experiment1()
        }
    }

    pub const COMPARISON_SPACING_MS: u64 = 50;

    pub fn total_jobs(&self) -> u32 {
        self.jobs_low + self.jobs_high
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.processors.is_empty() {
            return Err(HarnessError::Config("at least one processor is required".into()));
        }
        self.workload.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.policy.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.slices_per_tick == 0 {
            return Err(HarnessError::Config("slices per tick must be positive".into()));
        }
        if self.crash_at_ms.is_some() && self.broker.storage_root.is_none() {
            return Err(HarnessError::Config("crash injection needs a broker directory".into()));
        }
        Ok(())
    }

    /// The seeded submission order: `jobs_low` LOW and `jobs_high` HIGH
    /// requests, shuffled.
    pub fn job_stream(&self) -> Vec<JobRequestOptions> {
        let def = self.workload.definition_id();
        let mut stream: Vec<_> = std::iter::repeat_n(Priority::LOW, self.jobs_low as usize)
            .chain(std::iter::repeat_n(Priority::HIGH, self.jobs_high as usize))
            .map(|p| JobRequestOptions::new(def.clone(), p, self.policy))
            .collect();
        stream.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        stream
    }

    fn cluster_config(&self, routing: Routing) -> ClusterConfig {
        ClusterConfig {
            processors: self.processors.clone(),
            first_processor_id: crate::model::ProcessorId(1),
            processor: self.processor.clone(),
            broker: self.broker.clone(),
            repo_dir: None,
            routing,
            liveness_window_ms: self.scheduler.liveness_window_ms,
            slices_per_tick: self.slices_per_tick,
            tick_ms: 1,
            clock: self.clock,
        }
    }
}

/// Runs one configured job stream to completion.
pub fn run(config: &ExperimentConfig, routing: Routing) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    if config.total_jobs() == 0 {
        return Ok(ExperimentReport::empty());
    }
    let mut cluster = Cluster::new(config.cluster_config(routing))?;
    cluster.repo().ensure_definition(JobDefinition::for_workload(config.workload, Priority::LOW))?;
    cluster.warm_up(100_000)?;

    let start = cluster.now();
    for (i, options) in config.job_stream().into_iter().enumerate() {
        cluster.schedule_arrival(start + i as u64 * config.arrival_spacing_ms, options);
    }
    let mut crash_at = config.crash_at_ms;
    cluster.run_until_settled(config.max_ticks, |c| {
        if let (Some(at), Some(first)) = (crash_at, c.first_dispatch()) {
            if c.now() >= first + at {
                crash_at = None;
                c.crash_broker()?;
            }
        }
        Ok(())
    })?;

    let records: Vec<_> = cluster
        .repo()
        .query_jobs(&JobFilter::all())
        .into_iter()
        .filter(|j| cluster.dispatched().contains(&j.id))
        .collect();
    let report = ExperimentReport::from_records(&records, cluster.first_dispatch());
    tracing::info!(
        jobs = report.dispatched,
        completed = report.rows.len(),
        makespan_ms = report.makespan_ms,
        "experiment finished"
    );
    Ok(report)
}

fn require_kind(config: &ExperimentConfig, kind: WorkloadKind) -> Result<(), HarnessError> {
    if config.workload.kind() != kind {
        return Err(HarnessError::Config(format!("this experiment needs a {kind:?} workload, got {}", config.workload)));
    }
    Ok(())
}

/// Priority effect on a fixed amount of work per job.
pub fn run_experiment1(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    require_kind(config, WorkloadKind::PrimeCount)?;
    run(config, Routing::Scheduler(config.scheduler.clone()))
}

/// Priority effect on work done in a fixed time per job.
pub fn run_experiment2(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    require_kind(config, WorkloadKind::PrimeTimed)?;
    run(config, Routing::Scheduler(config.scheduler.clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub per_query_latency_ms: u64,
    pub baseline: ExperimentReport,
    pub proposed: ExperimentReport,
}

impl ComparisonReport {
    /// `(baseline − proposed) / baseline` on mean total time.
    pub fn improvement(&self) -> f64 {
        let b = self.baseline.overall().mean_total_ms;
        let p = self.proposed.overall().mean_total_ms;
        if b == 0.0 {
            0.0
        } else {
            (b - p) / b
        }
    }

    pub fn is_valid(&self) -> bool {
        self.baseline.is_valid() && self.proposed.is_valid()
    }
}

/// Runs the same job stream through the scheduler and through
/// sender-initiated routing with the given per-query latency.
pub fn run_comparison(config: &ExperimentConfig, per_query_latency_ms: u64) -> Result<ComparisonReport, HarnessError> {
    let proposed = run(config, Routing::Scheduler(config.scheduler.clone()))?;
    let sender = SenderConfig { per_query_latency_ms, seed: config.seed, ..SenderConfig::default() };
    let baseline = run(config, Routing::Sender(sender))?;
    Ok(ComparisonReport { per_query_latency_ms, baseline, proposed })
}

pub const COMPARISON_CSV: &str = "comparison.csv";

/// One row per report: latency, both arms' mean total time, improvement.
pub fn comparison_csv(reports: &[ComparisonReport]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["per_query_latency_ms", "baseline_mean_total_ms", "proposed_mean_total_ms", "improvement"])?;
    for r in reports {
        w.write_record([
            r.per_query_latency_ms.to_string(),
            fmt_mean(r.baseline.overall().mean_total_ms),
            fmt_mean(r.proposed.overall().mean_total_ms),
            format!("{:.6}", r.improvement()),
        ])?;
    }
    w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<PathBuf, HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| HarnessError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(&path, bytes).map_err(|source| HarnessError::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Writes each arm's CSV under `baseline/` and `proposed/` plus a one-line
/// `comparison.csv`.
pub fn emit_comparison(report: &ComparisonReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, HarnessError> {
    let dir = dir.as_ref();
    let mut paths = emit_report(&report.baseline, dir.join("baseline"))?;
    paths.extend(emit_report(&report.proposed, dir.join("proposed"))?);
    let bytes = comparison_csv(std::slice::from_ref(report))?;
    paths.push(write_file(dir.join(COMPARISON_CSV), &bytes)?);
    Ok(paths)
}

/// Writes every latency's reports under `latency-<ms>/` and a combined
/// `comparison.csv` at the top.
pub fn emit_sweep(reports: &[ComparisonReport], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, HarnessError> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    for r in reports {
        paths.extend(emit_comparison(r, dir.join(format!("latency-{}", r.per_query_latency_ms)))?);
    }
    paths.push(write_file(dir.join(COMPARISON_CSV), &comparison_csv(reports)?)?);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(workload: WorkloadParams) -> ExperimentConfig {
        ExperimentConfig { jobs_low: 3, jobs_high: 3, workload, ..ExperimentConfig::experiment1() }
    }

    #[test]
    fn zero_jobs_give_an_empty_report() {
        let cfg = ExperimentConfig { jobs_low: 0, jobs_high: 0, ..ExperimentConfig::experiment1() };
        let r = run_experiment1(&cfg).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.makespan_ms, 0);
    }

    #[test]
    fn experiments_check_the_workload_kind() {
        assert!(matches!(run_experiment1(&ExperimentConfig::experiment2()), Err(HarnessError::Config(_))));
        assert!(matches!(run_experiment2(&ExperimentConfig::experiment1()), Err(HarnessError::Config(_))));
    }

    #[test]
    fn small_run_completes_every_job() {
        let r = run_experiment1(&small(WorkloadParams::count(500).unwrap())).unwrap();
        assert!(r.is_valid());
        assert_eq!(r.rows.len(), 6);
        assert!(r.additivity_violations().is_empty());
        assert!(r.rows.iter().all(|row| row.primes == 500));
    }

    #[test]
    fn stream_is_seeded() {
        let a = ExperimentConfig::experiment1().job_stream();
        let b = ExperimentConfig::experiment1().job_stream();
        let c = ExperimentConfig { seed: 7, ..ExperimentConfig::experiment1() }.job_stream();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.iter().filter(|o| o.priority == Priority::HIGH).count(), 20);
    }

    #[test]
    fn crash_needs_durable_broker() {
        let cfg = ExperimentConfig { crash_at_ms: Some(10), ..small(WorkloadParams::count(10).unwrap()) };
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn survives_a_broker_restart() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            broker: BrokerConfig::durable(dir.path()),
            crash_at_ms: Some(40),
            ..small(WorkloadParams::count(2_000).unwrap())
        };
        let r = run_experiment1(&cfg).unwrap();
        assert!(r.is_valid(), "{:?}", r.invalid);
        assert_eq!(r.rows.len(), 6);
    }

    #[test]
    fn real_clock_smoke() {
        let cfg = ExperimentConfig {
            clock: ClockMode::Real,
            slices_per_tick: 4,
            ..small(WorkloadParams::count(100).unwrap())
        };
        let r = run_experiment1(&cfg).unwrap();
        assert!(r.is_valid());
        assert!(r.additivity_violations().is_empty());
    }
}
