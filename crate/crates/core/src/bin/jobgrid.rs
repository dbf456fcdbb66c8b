use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use jobgrid::bus::{Broker, BrokerConfig};
use jobgrid::clock::VirtualClock;
use jobgrid::dispatcher::{Dispatcher, DispatcherConfig, JobRequestOptions};
use jobgrid::harness::{
    emit_report, emit_sweep, resume_time, run_comparison, run_experiment1, run_experiment2, ClockMode, Cluster,
    ClusterConfig, ComparisonReport, ExperimentConfig, ExperimentReport, HarnessError, ProcessorSpec, Routing,
    COMPARISON_CSV,
};
use jobgrid::model::{JobStatus, Priority, ProcessorId, SchedulingPolicy, DEFAULT_MIXED_ALPHA};
use jobgrid::monitor::liveness_view;
use jobgrid::processor::ProcessorConfig;
use jobgrid::repository::{JobDefinition, JobFilter, Repository};
use jobgrid::scheduler::SchedulerConfig;
use jobgrid::workload::WorkloadParams;

#[derive(Parser, Debug)]
#[command(name = "jobgrid", version, about = "Dispatcher/processor job framework and experiment runner")]
struct Cli {
    /// Directory for queues, the repository journal and reports.
    #[arg(long, global = true, default_value = "jobgrid-data")]
    data_dir: PathBuf,
    #[arg(long, global = true, default_value_t = ExperimentConfig::DEFAULT_SEED)]
    seed: u64,
    /// `virtual` for deterministic runs, `real` for demonstrations.
    #[arg(long, global = true, default_value = "virtual", value_parser = parse_clock)]
    clock: ClockMode,
    #[command(flatten)]
    broker: BrokerArgs,
    #[command(flatten)]
    scheduler: SchedulerArgs,
    #[command(flatten)]
    processor: ProcessorArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct BrokerArgs {
    /// Keep queue logs here instead of in memory (experiments) or under
    /// `<data-dir>/broker` (submit/process).
    #[arg(long, global = true)]
    broker_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 10)]
    poll_interval_ms: u64,
    #[arg(long, global = true, default_value_t = 30_000)]
    visibility_timeout_ms: u64,
}

#[derive(Args, Debug)]
struct SchedulerArgs {
    /// Policy for experiment jobs and for `submit` without `--policy`.
    #[arg(long, global = true, default_value = "least-load")]
    policy_default: String,
    /// Alpha for a bare `mixed` policy.
    #[arg(long, global = true, default_value_t = DEFAULT_MIXED_ALPHA)]
    mixed_alpha: f64,
    #[arg(long, global = true, default_value_t = 1500)]
    liveness_window_ms: u64,
}

#[derive(Args, Debug)]
struct ProcessorArgs {
    /// Id of the first processor; further processors take the following ids.
    #[arg(long, global = true, default_value = "P1")]
    processor_id: ProcessorId,
    /// Concurrent jobs per priority pool.
    #[arg(long, global = true, default_value_t = 10)]
    capacity: u32,
    #[arg(long, global = true, default_value_t = 1.0)]
    cost_factor: f64,
    /// Compute weight per pool.
    #[arg(long, global = true, default_value = "high=2,low=1", value_parser = parse_weights)]
    weights: Weights,
    #[arg(long, global = true, default_value_t = 500)]
    heartbeat_ms: u64,
}

#[derive(Clone, Debug)]
struct Weights(Vec<(Priority, u32)>);

#[derive(Args, Debug)]
struct RunArgs {
    /// Processors in the cluster.
    #[arg(long)]
    processors: Option<usize>,
    #[arg(long, default_value_t = 20)]
    jobs_low: u32,
    #[arg(long, default_value_t = 20)]
    jobs_high: u32,
    /// Where to write jobs.csv and summary.csv (default `<data-dir>/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restart the broker this many ms after the first dispatch (needs --broker-dir).
    #[arg(long)]
    crash_at_ms: Option<u64>,
    /// Gap between submissions; 0 submits every job at once.
    #[arg(long, default_value_t = 0)]
    arrival_spacing_ms: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fixed prime count per job: priority effect on total time.
    Exp1 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 20_000)]
        primes: u64,
    },
    /// Fixed duration per job: priority effect on primes found.
    Exp2 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 2_000)]
        duration_ms: u64,
    },
    /// Proposed scheduler versus sender-initiated routing.
    Compare {
        #[arg(long, default_value_t = 4)]
        nodes: usize,
        #[arg(long, default_value_t = 50)]
        query_latency_ms: u64,
        /// Total jobs, split evenly between LOW and HIGH.
        #[arg(long, default_value_t = 40)]
        jobs: u32,
        #[arg(long, default_value_t = 20_000)]
        primes: u64,
        /// Gap between submissions.
        #[arg(long, default_value_t = ExperimentConfig::COMPARISON_SPACING_MS)]
        arrival_spacing_ms: u64,
        /// Comma-separated latencies to sweep instead of a single run.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record jobs and queue their requests in the data directory.
    Submit {
        /// Job definition, e.g. `primes-count:20000` or `primes-timed:2000`.
        #[arg(long)]
        definition: String,
        #[arg(long, default_value = "low")]
        priority: Priority,
        /// least-load | least-cost | mixed[:alpha] | affinity:<proc>
        #[arg(long)]
        policy: Option<String>,
        #[arg(long, default_value_t = 1)]
        count: u32,
    },
    /// Run processors over the data directory until submitted jobs finish.
    Process {
        #[arg(long, default_value_t = 1)]
        processors: usize,
        #[arg(long, default_value_t = 10_000_000)]
        max_ticks: u64,
    },
    /// Processor table and job counts from the repository.
    Status {
        /// Reference time for heartbeat ages (default: newest recorded time).
        #[arg(long)]
        now_ms: Option<u64>,
    },
    /// Export jobs.csv and summary.csv from the repository.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_clock(s: &str) -> Result<ClockMode, String> {
    s.parse().map_err(|e: HarnessError| e.to_string())
}

fn parse_weights(s: &str) -> Result<Weights, String> {
    s.split(',')
        .map(|part| {
            let (p, w) = part.split_once('=').ok_or_else(|| format!("expected <priority>=<weight>, got `{part}`"))?;
            let p: Priority = p.trim().parse().map_err(|e| format!("{e}"))?;
            let w: u32 = w.trim().parse().map_err(|e| format!("weight `{w}`: {e}"))?;
            Ok((p, w))
        })
        .collect::<Result<Vec<_>, String>>()
        .map(Weights)
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    InvalidRun(String),
}

impl From<jobgrid::repository::RepoError> for CliError {
    fn from(e: jobgrid::repository::RepoError) -> Self {
        CliError::Harness(e.into())
    }
}

impl From<jobgrid::bus::BusError> for CliError {
    fn from(e: jobgrid::bus::BusError) -> Self {
        CliError::Harness(e.into())
    }
}

impl From<jobgrid::dispatcher::DispatchError> for CliError {
    fn from(e: jobgrid::dispatcher::DispatchError) -> Self {
        CliError::Harness(e.into())
    }
}

impl Cli {
    fn policy(&self, explicit: Option<&str>) -> Result<SchedulingPolicy, CliError> {
        let raw = explicit.unwrap_or(&self.scheduler.policy_default);
        let policy = if raw == "mixed" {
            SchedulingPolicy::mixed(self.scheduler.mixed_alpha)
        } else {
            raw.parse()
        };
        policy.map_err(|e| CliError::Usage(e.to_string()))
    }

    fn processor_config(&self) -> ProcessorConfig {
        ProcessorConfig {
            weights: self.processor.weights.0.clone(),
            heartbeat_interval_ms: self.processor.heartbeat_ms,
            ..ProcessorConfig::default()
        }
    }

    fn broker_config(&self, default_dir: Option<PathBuf>) -> BrokerConfig {
        BrokerConfig {
            storage_root: self.broker.broker_dir.clone().or(default_dir),
            poll_interval_ms: self.broker.poll_interval_ms,
            visibility_timeout_ms: self.broker.visibility_timeout_ms,
            ..BrokerConfig::default()
        }
    }

    fn experiment(
        &self,
        run: &RunArgs,
        workload: WorkloadParams,
        default_processors: usize,
    ) -> Result<ExperimentConfig, CliError> {
        Ok(ExperimentConfig {
            processors: vec![
                ProcessorSpec::new(self.processor.capacity, self.processor.cost_factor);
                run.processors.unwrap_or(default_processors)
            ],
            jobs_low: run.jobs_low,
            jobs_high: run.jobs_high,
            workload,
            policy: self.policy(None)?,
            clock: self.clock,
            seed: self.seed,
            processor: self.processor_config(),
            broker: self.broker_config(None),
            scheduler: SchedulerConfig { liveness_window_ms: self.scheduler.liveness_window_ms, ..Default::default() },
            crash_at_ms: run.crash_at_ms,
            arrival_spacing_ms: run.arrival_spacing_ms,
            ..ExperimentConfig::experiment1()
        })
    }

    fn repo_dir(&self) -> PathBuf {
        self.data_dir.join("repo")
    }
}

fn print_report(name: &str, report: &ExperimentReport) {
    println!("{name}: {} of {} jobs completed, makespan {} ms", report.rows.len(), report.dispatched, report.makespan_ms);
    println!("  {:<6} {:>5} {:>12} {:>12} {:>12} {:>12}", "scope", "jobs", "wait_ms", "process_ms", "total_ms", "primes");
    let mut scopes: Vec<(String, _)> = report.priorities().into_iter().map(|p| (p.to_string(), report.by_priority(p))).collect();
    scopes.push(("all".into(), report.overall()));
    for (scope, a) in scopes {
        println!(
            "  {:<6} {:>5} {:>12.1} {:>12.1} {:>12.1} {:>12.1}",
            scope, a.jobs, a.mean_wait_ms, a.mean_processing_ms, a.mean_total_ms, a.mean_primes
        );
    }
    for bad in &report.invalid {
        println!("  job {} ({}) ended {}{}", bad.job_id, bad.priority, bad.status, bad.error.as_deref().map(|e| format!(": {e}")).unwrap_or_default());
    }
}

fn finish_run(name: &str, report: &ExperimentReport, out: &Path) -> Result<(), CliError> {
    print_report(name, report);
    for path in emit_report(report, out)? {
        println!("  wrote {}", path.display());
    }
    if !report.is_valid() {
        return Err(CliError::InvalidRun(format!("{name}: {} job(s) did not complete", report.invalid.len())));
    }
    Ok(())
}

fn print_comparison(c: &ComparisonReport) {
    println!(
        "latency {:>4} ms: sender-initiated {:>10.1} ms, proposed {:>10.1} ms, improvement {:>6.2}%",
        c.per_query_latency_ms,
        c.baseline.overall().mean_total_ms,
        c.proposed.overall().mean_total_ms,
        100.0 * c.improvement()
    );
}

fn open_definitions(repo: &Repository, definition: &str) -> Result<(), CliError> {
    if repo.definitions().iter().any(|d| d.definition_id == definition) {
        return Ok(());
    }
    let workload: WorkloadParams = definition
        .parse()
        .map_err(|e| CliError::Usage(format!("unknown job definition `{definition}`: {e}")))?;
    repo.ensure_definition(JobDefinition::for_workload(workload, Priority::LOW))?;
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Exp1 { run, primes } => {
            let workload = WorkloadParams::count(*primes).map_err(|e| CliError::Usage(e.to_string()))?;
            let report = run_experiment1(&cli.experiment(run, workload, 1)?)?;
            finish_run("exp1", &report, &run.out.clone().unwrap_or_else(|| cli.data_dir.join("exp1")))
        }
        Command::Exp2 { run, duration_ms } => {
            let workload = WorkloadParams::timed(*duration_ms).map_err(|e| CliError::Usage(e.to_string()))?;
            let report = run_experiment2(&cli.experiment(run, workload, 1)?)?;
            finish_run("exp2", &report, &run.out.clone().unwrap_or_else(|| cli.data_dir.join("exp2")))
        }
        Command::Compare { nodes, query_latency_ms, jobs, primes, arrival_spacing_ms, sweep, out } => {
            let run = RunArgs {
                processors: Some(*nodes),
                jobs_low: jobs / 2,
                jobs_high: jobs - jobs / 2,
                out: None,
                crash_at_ms: None,
                arrival_spacing_ms: *arrival_spacing_ms,
            };
            let workload = WorkloadParams::count(*primes).map_err(|e| CliError::Usage(e.to_string()))?;
            let config = cli.experiment(&run, workload, *nodes)?;
            let latencies = if sweep.is_empty() { vec![*query_latency_ms] } else { sweep.clone() };
            let out = out.clone().unwrap_or_else(|| cli.data_dir.join("compare"));
            let mut reports = Vec::with_capacity(latencies.len());
            for latency in latencies {
                let c = run_comparison(&config, latency)?;
                print_comparison(&c);
                reports.push(c);
            }
            emit_sweep(&reports, &out)?;
            println!("  wrote {}", out.join(COMPARISON_CSV).display());
            if reports.iter().any(|c| !c.is_valid()) {
                return Err(CliError::InvalidRun("compare: some jobs did not complete".into()));
            }
            Ok(())
        }
        Command::Submit { definition, priority, policy, count } => {
            let repo = Arc::new(Repository::open(cli.repo_dir())?);
            open_definitions(&repo, definition)?;
            let clock = VirtualClock::new(resume_time(&repo));
            let broker = Arc::new(Broker::open(cli.broker_config(Some(cli.data_dir.join("broker"))), Arc::new(clock))?);
            let dispatcher = Dispatcher::new(broker, repo, DispatcherConfig::default())?;
            let options = JobRequestOptions::new(definition.clone(), *priority, cli.policy(policy.as_deref())?);
            for _ in 0..*count {
                println!("{}", dispatcher.dispatch(&options)?);
            }
            Ok(())
        }
        Command::Process { processors, max_ticks } => {
            let mut cluster = Cluster::new(ClusterConfig {
                processors: vec![ProcessorSpec::new(cli.processor.capacity, cli.processor.cost_factor); *processors],
                first_processor_id: cli.processor.processor_id,
                processor: cli.processor_config(),
                broker: cli.broker_config(Some(cli.data_dir.join("broker"))),
                repo_dir: Some(cli.repo_dir()),
                routing: Routing::Scheduler(SchedulerConfig {
                    liveness_window_ms: cli.scheduler.liveness_window_ms,
                    ..Default::default()
                }),
                liveness_window_ms: cli.scheduler.liveness_window_ms,
                clock: cli.clock,
                ..ClusterConfig::default()
            })?;
            cluster.warm_up(100_000)?;
            let open = |c: &Cluster| c.repo().query_jobs(&JobFilter::all()).iter().filter(|j| !j.status.is_terminal()).count();
            let mut ticks = 0;
            while open(&cluster) > 0 {
                if ticks >= *max_ticks {
                    return Err(CliError::InvalidRun(format!("{} job(s) still open after {ticks} ticks", open(&cluster))));
                }
                cluster.step()?;
                ticks += 1;
            }
            println!("processed for {ticks} ticks; no open jobs");
            Ok(())
        }
        Command::Status { now_ms } => {
            let repo = Repository::open(cli.repo_dir())?;
            let now = now_ms.unwrap_or_else(|| resume_time(&repo).saturating_sub(1));
            println!("{:<6} {:>6} {:>8} {:>10} {:>14}", "id", "load", "cost", "available", "heartbeat_age");
            let live: BTreeMap<_, _> = liveness_view(&repo, now, cli.scheduler.liveness_window_ms).into_iter().collect();
            for p in repo.processors() {
                let age = p.last_heartbeat.map_or("never".to_string(), |t| format!("{} ms", now.saturating_sub(t)));
                println!("{:<6} {:>6} {:>8.2} {:>10} {:>14}", p.id.to_string(), p.current_load, p.cost_factor, live[&p.id], age);
            }
            println!();
            for s in JobStatus::ALL {
                let n = repo.query_jobs(&JobFilter::all().status(s)).len();
                println!("{:<12} {n}", s.as_str());
            }
            Ok(())
        }
        Command::Report { out } => {
            let repo = Repository::open(cli.repo_dir())?;
            let records = repo.query_jobs(&JobFilter::all());
            let first = records.iter().map(|j| j.submitted_at).min();
            let report = ExperimentReport::from_records(&records, first);
            finish_run("report", &report, &out.clone().unwrap_or_else(|| cli.data_dir.join("report")))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("jobgrid: {e}");
            match e {
                CliError::Usage(_)
                | CliError::Harness(
                    HarnessError::Config(_) | HarnessError::Processor(jobgrid::processor::ProcessorError::Config(_)),
                ) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
