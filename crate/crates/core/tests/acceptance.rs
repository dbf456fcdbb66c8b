//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jobgrid::bus::QueuedMessage;
use jobgrid::harness::{
    emit_report, read_jobs_csv, run_comparison, run_experiment1, run_experiment2, Cluster, ClusterConfig,
    ExperimentConfig, ExperimentReport, ProcessorSpec, JOBS_CSV, SUMMARY_CSV,
};
use jobgrid::model::HeartbeatPayload;
use jobgrid::scheduler::ScheduleOutcome;
use jobgrid::{
    select_target, Broker, BrokerConfig, BusError, Clock, Delivery, DeliveryTag, Dispatcher, DispatcherConfig,
    JobDefinition, JobRequestOptions, JobStatus, Payload, Priority, ProcessorId, ProcessorInfo,
    ProcessorSnapshot, Repository, Scheduler, SchedulerConfig, SchedulingPolicy, Selection, SharedClock,
    VirtualClock, WorkloadParams,
};

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Every report produced along the way, kept for the additivity check.
#[derive(Default)]
struct Collected {
    reports: Vec<(String, ExperimentReport)>,
}

impl Collected {
    fn keep(&mut self, label: &str, report: &ExperimentReport) {
        self.reports.push((label.to_string(), report.clone()));
    }

    fn find(&self, label: &str) -> Option<&ExperimentReport> {
        self.reports.iter().find(|(l, _)| l == label).map(|(_, r)| r)
    }
}

fn priority_means(report: &ExperimentReport) -> (f64, f64) {
    (report.by_priority(Priority::HIGH).mean_total_ms, report.by_priority(Priority::LOW).mean_total_ms)
}

fn experiment1(c: &mut Collected) -> Verdict {
    let report = run_experiment1(&ExperimentConfig::experiment1()).map_err(err)?;
    c.keep("exp1", &report);
    ensure(report.is_valid(), || format!("{} invalid jobs", report.invalid.len()))?;
    ensure(report.rows.len() == 40, || format!("{} completed jobs, expected 40", report.rows.len()))?;
    let (high, low) = priority_means(&report);
    let ratio = low / high;
    let detail = format!("mean total HIGH {high:.1} ms, LOW {low:.1} ms, LOW/HIGH {ratio:.3} (need >= 1.2)");
    ensure(high < low && ratio >= 1.2, || detail.clone())?;
    Ok(detail)
}

fn experiment2(c: &mut Collected) -> Verdict {
    let report = run_experiment2(&ExperimentConfig::experiment2()).map_err(err)?;
    c.keep("exp2", &report);
    ensure(report.is_valid(), || format!("{} invalid jobs", report.invalid.len()))?;
    let high = report.by_priority(Priority::HIGH).mean_primes;
    let low = report.by_priority(Priority::LOW).mean_primes;
    let ratio = high / low;
    let detail = format!("mean primes HIGH {high:.1}, LOW {low:.1}, ratio {ratio:.3} (need 2.0 ± 0.3)");
    ensure((ratio - 2.0).abs() <= 0.3, || detail.clone())?;
    Ok(detail)
}

fn comparison(c: &mut Collected) -> Verdict {
    let config = ExperimentConfig::comparison();
    ensure(config.processors.len() == 4, || "comparison preset must have 4 nodes".into())?;
    let at50 = run_comparison(&config, 50).map_err(err)?;
    c.keep("compare50/baseline", &at50.baseline);
    c.keep("compare50/proposed", &at50.proposed);
    ensure(at50.is_valid(), || "comparison at 50 ms has invalid jobs".into())?;
    let at0 = run_comparison(&config, 0).map_err(err)?;
    c.keep("compare0/baseline", &at0.baseline);
    c.keep("compare0/proposed", &at0.proposed);
    ensure(at0.is_valid(), || "comparison at 0 ms has invalid jobs".into())?;

    let imp50 = at50.improvement();
    let imp0 = at0.improvement();
    let detail = format!("improvement {:.2}% at 50 ms (need >= 12%), {imp0} at 0 ms (need exactly 0)", imp50 * 100.0);
    ensure(imp50 >= 0.12, || detail.clone())?;
    ensure(imp0 == 0.0, || detail.clone())?;
    Ok(detail)
}

fn group2(c: &mut Collected) -> Verdict {
    let one = ExperimentConfig::experiment1();
    let two = ExperimentConfig { processors: vec![ProcessorSpec::new(10, 1.0); 2], ..one.clone() };
    let r1 = match c.find("exp1") {
        Some(r) => r.clone(),
        None => run_experiment1(&one).map_err(err)?,
    };
    let r2 = run_experiment1(&two).map_err(err)?;
    c.keep("group2/2", &r2);
    ensure(r1.is_valid() && r2.is_valid(), || "invalid jobs in a scaling run".into())?;
    let ratio = r2.makespan_ms as f64 / r1.makespan_ms as f64;
    let detail = format!(
        "makespan 1 processor {} ms, 2 processors {} ms, ratio {ratio:.3} (need < 1 and in [0.5, 0.8])",
        r1.makespan_ms, r2.makespan_ms
    );
    ensure(r2.makespan_ms < r1.makespan_ms && (0.5..=0.8).contains(&ratio), || detail.clone())?;
    Ok(detail)
}

fn csv_bytes(report: &ExperimentReport, dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    emit_report(report, dir).map_err(err)?;
    [JOBS_CSV, SUMMARY_CSV]
        .iter()
        .map(|name| fs::read(dir.join(name)).map(|b| (name.to_string(), b)).map_err(err))
        .collect()
}

fn determinism(c: &mut Collected) -> Verdict {
    let tmp = tempfile::tempdir().map_err(err)?;
    let exp1 = ExperimentConfig::experiment1();
    let reruns: Vec<(&str, ExperimentReport)> = vec![
        ("exp1", run_experiment1(&exp1).map_err(err)?),
        ("exp2", run_experiment2(&ExperimentConfig::experiment2()).map_err(err)?),
        ("group2/2", {
            let two = ExperimentConfig { processors: vec![ProcessorSpec::new(10, 1.0); 2], ..exp1 };
            run_experiment1(&two).map_err(err)?
        }),
    ];
    let at50 = run_comparison(&ExperimentConfig::comparison(), 50).map_err(err)?;
    let reruns = reruns
        .into_iter()
        .chain([("compare50/baseline", at50.baseline), ("compare50/proposed", at50.proposed)]);

    let mut files = 0;
    for (label, second) in reruns {
        let first = c.find(label).ok_or_else(|| format!("no first run recorded for {label}"))?.clone();
        let a = csv_bytes(&first, &tmp.path().join("a").join(label))?;
        let b = csv_bytes(&second, &tmp.path().join("b").join(label))?;
        for ((name, x), (_, y)) in a.iter().zip(&b) {
            ensure(x == y, || format!("{label}/{name} differs between runs with the same seed"))?;
            files += 1;
        }
    }
    Ok(format!("{files} CSV files byte-identical across repeated seeded runs"))
}

fn additivity(c: &mut Collected) -> Verdict {
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut rows = 0;
    for (i, (label, report)) in c.reports.iter().enumerate() {
        let bad = report.additivity_violations();
        ensure(bad.is_empty(), || format!("{label}: total != wait + processing for {bad:?}"))?;
        // and in what actually lands on disk
        let dir = tmp.path().join(i.to_string());
        emit_report(report, &dir).map_err(err)?;
        let parsed = read_jobs_csv(&fs::read(dir.join(JOBS_CSV)).map_err(err)?).map_err(err)?;
        for r in &parsed {
            ensure(r.total_ms == r.wait_ms + r.processing_ms, || format!("{label}: emitted row {:?}", r))?;
        }
        ensure(parsed.len() == report.rows.len(), || format!("{label}: row count changed on disk"))?;
        rows += parsed.len();
    }
    ensure(rows > 0, || "no rows were checked".into())?;
    Ok(format!("{rows} job rows across {} reports, all exactly additive", c.reports.len()))
}

// ---- broker durability ----------------------------------------------------

#[derive(Clone, Debug)]
enum Op {
    Enqueue(usize),
    Dequeue(usize, u64),
    Ack(usize),
    Advance(u64),
    Crash,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0..2usize).prop_map(Op::Enqueue),
        3 => (0..2usize, 1..200u64).prop_map(|(q, v)| Op::Dequeue(q, v)),
        3 => any::<usize>().prop_map(Op::Ack),
        2 => (1..150u64).prop_map(Op::Advance),
        1 => Just(Op::Crash),
    ]
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum TagState {
    Live,
    Acked,
    Superseded,
}

struct ModelMsg {
    id: String,
    marker: u64,
    lease: Option<(DeliveryTag, u64)>,
}

struct Held {
    queue: usize,
    tag: DeliveryTag,
    epoch: u32,
}

const QUEUES: [&str; 2] = ["alpha", "beta"];

fn marker(payload: &Payload) -> u64 {
    match payload {
        Payload::Heartbeat(h) => h.timestamp,
        other => panic!("unexpected payload {other:?}"),
    }
}

fn broker_case(ops: &[Op]) -> Result<(), TestCaseError> {
    let dir = tempfile::tempdir().map_err(|e| TestCaseError::fail(e.to_string()))?;
    let clock = VirtualClock::new(0);
    let shared: SharedClock = Arc::new(clock.clone());
    let config = BrokerConfig::durable(dir.path());
    let open = |cfg: &BrokerConfig| Broker::open(cfg.clone(), shared.clone()).expect("broker opens");
    let mut broker = open(&config);
    for q in QUEUES {
        broker.create_queue(q, true).expect("queue created");
    }

    let mut model: Vec<Vec<ModelMsg>> = vec![Vec::new(), Vec::new()];
    let mut acked: HashSet<String> = HashSet::new();
    let mut tags: HashMap<DeliveryTag, TagState> = HashMap::new();
    let mut held: Vec<Held> = Vec::new();
    let mut epoch = 0u32;
    let mut next_marker = 0u64;

    for op in ops {
        let now = clock.now_ms();
        match *op {
            Op::Enqueue(q) => {
                next_marker += 1;
                let body = Payload::Heartbeat(HeartbeatPayload {
                    processor: ProcessorId(1),
                    current_load: 0,
                    timestamp: next_marker,
                });
                let id = broker.enqueue(QUEUES[q], body).expect("enqueue");
                prop_assert!(!acked.contains(&id), "message id {id} reused");
                model[q].push(ModelMsg { id, marker: next_marker, lease: None });
            }
            Op::Dequeue(q, vis) => {
                let expected = model[q].iter().position(|m| m.lease.is_none_or(|(_, until)| until <= now));
                let got: Option<Delivery> = broker.dequeue(QUEUES[q], "c", vis).expect("dequeue");
                match (expected, got) {
                    (None, None) => {}
                    (Some(i), Some(d)) => {
                        let m = &mut model[q][i];
                        prop_assert_eq!(&d.message.msg_id, &m.id, "FIFO order broken");
                        prop_assert_eq!(marker(&d.message.body), m.marker);
                        prop_assert!(!acked.contains(&d.message.msg_id), "acked message redelivered");
                        if let Some((old, _)) = m.lease.replace((d.delivery_tag, now + vis)) {
                            tags.insert(old, TagState::Superseded);
                        }
                        tags.insert(d.delivery_tag, TagState::Live);
                        held.push(Held { queue: q, tag: d.delivery_tag, epoch });
                    }
                    (e, g) => prop_assert!(false, "dequeue mismatch: expected {:?}, got {:?}", e, g.map(|d| d.message.msg_id)),
                }
            }
            Op::Ack(pick) => {
                if held.is_empty() {
                    continue;
                }
                let h = &held[pick % held.len()];
                let result = broker.ack(QUEUES[h.queue], h.tag);
                if h.epoch != epoch {
                    prop_assert!(matches!(result, Err(BusError::UnknownTag(_))), "pre-crash tag accepted: {:?}", result);
                    continue;
                }
                match tags[&h.tag] {
                    TagState::Acked => prop_assert!(result.is_ok(), "repeat ack failed: {:?}", result),
                    TagState::Superseded => {
                        prop_assert!(matches!(result, Err(BusError::ExpiredTag(_))), "superseded tag: {:?}", result)
                    }
                    TagState::Live => {
                        prop_assert!(result.is_ok(), "live ack failed: {:?}", result);
                        let i = model[h.queue]
                            .iter()
                            .position(|m| m.lease.is_some_and(|(t, _)| t == h.tag))
                            .expect("live tag has a leased message");
                        let m = model[h.queue].remove(i);
                        acked.insert(m.id);
                        tags.insert(h.tag, TagState::Acked);
                    }
                }
            }
            Op::Advance(ms) => clock.advance(ms),
            Op::Crash => {
                drop(broker);
                broker = open(&config);
                prop_assert_eq!(broker.recovery_report().skipped(), 0);
                epoch += 1;
                tags.clear();
                for m in model.iter_mut().flatten() {
                    m.lease = None;
                }
            }
        }

        for (q, name) in QUEUES.iter().enumerate() {
            let live: Vec<QueuedMessage> = broker.messages(name).expect("messages");
            let got: Vec<&str> = live.iter().map(|m| m.message.msg_id.as_str()).collect();
            let want: Vec<&str> = model[q].iter().map(|m| m.id.as_str()).collect();
            prop_assert_eq!(got, want, "queue {} contents diverged after {:?}", name, op);
        }
    }
    Ok(())
}

fn broker_durability(_: &mut Collected) -> Verdict {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = proptest::collection::vec(op(), 1..60);
    runner.run(&strategy, |ops| broker_case(&ops)).map_err(err)?;
    Ok("1000 randomized crash/recover sequences: no acked message back, none lost, FIFO kept".into())
}

// ---- scheduler oracle -----------------------------------------------------

type Q = Ratio<i64>;

struct Generated {
    id: ProcessorId,
    capacity: u32,
    load: u32,
    /// cost factor in quarters
    cost_q: i64,
    heartbeat: Option<u64>,
}

fn oracle_pick(policy: &str, alpha_tenths: i64, live: &[&Generated]) -> Option<ProcessorId> {
    let max_cost = live.iter().map(|g| g.cost_q).max().unwrap_or(0);
    let key = |g: &Generated| -> Q {
        match policy {
            "load" => Q::from_integer(g.load as i64),
            "cost" => Q::new(g.cost_q, 4),
            _ => {
                let alpha = Q::new(alpha_tenths, 10);
                let load = Q::new(g.load as i64, g.capacity as i64);
                let cost = if max_cost > 0 { Q::new(g.cost_q, max_cost) } else { Q::from_integer(0) };
                alpha * load + (Q::from_integer(1) - alpha) * cost
            }
        }
    };
    let mut best: Option<(Q, ProcessorId)> = None;
    for g in live {
        let k = key(g);
        if best.as_ref().is_none_or(|(bk, bid)| k < *bk || (k == *bk && g.id < *bid)) {
            best = Some((k, g.id));
        }
    }
    best.map(|(_, id)| id)
}

fn aborts_without_targets() -> Result<usize, String> {
    let clock = VirtualClock::new(10_000);
    let shared: SharedClock = Arc::new(clock.clone());
    let broker = Arc::new(Broker::open(BrokerConfig::in_memory(), shared).map_err(err)?);
    let repo = Arc::new(Repository::in_memory());
    let workload = WorkloadParams::count(10).map_err(err)?;
    repo.define_job(JobDefinition::for_workload(workload, Priority::LOW)).map_err(err)?;
    let dispatcher = Dispatcher::new(broker.clone(), repo.clone(), DispatcherConfig::default()).map_err(err)?;
    let scheduler = Scheduler::new(broker.clone(), repo.clone(), SchedulerConfig::default()).map_err(err)?;
    let policies = [
        SchedulingPolicy::LeastLoad,
        SchedulingPolicy::LeastCost,
        SchedulingPolicy::mixed(0.5).map_err(err)?,
        SchedulingPolicy::Affinity(ProcessorId(1)),
    ];

    let mut aborted = 0;
    for stale in [false, true] {
        if stale {
            // registered, but its only heartbeat is far outside the window
            let id = repo.register_processor(&ProcessorInfo::new(10, 1.0).with_id(ProcessorId(1))).map_err(err)?;
            repo.update_processor_status(id, 0, 0).map_err(err)?;
        }
        for policy in policies {
            let job = dispatcher
                .dispatch(&JobRequestOptions::new(workload.definition_id(), Priority::HIGH, policy))
                .map_err(err)?;
            let outcomes = scheduler.poll().map_err(err)?;
            ensure(outcomes == vec![ScheduleOutcome::Aborted(job)], || format!("{policy}: {outcomes:?}"))?;
            let status = repo.job(job).map(|j| j.status);
            ensure(status == Some(JobStatus::Aborted), || format!("{policy}: job ended {status:?}"))?;
            aborted += 1;
        }
    }
    ensure(!broker.has_queue(&ProcessorId(1).dispatch_queue()) || broker.is_empty(&ProcessorId(1).dispatch_queue()).unwrap_or(false), || {
        "a request reached a dispatch queue".into()
    })?;
    Ok(aborted)
}

fn scheduler_oracle(_: &mut Collected) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let now = 5_000u64;
    let mut checked = 0usize;
    for case in 0..10_000 {
        let n = rng.gen_range(0..8u32);
        let window = rng.gen_range(0..=3_000u64);
        let generated: Vec<Generated> = (0..n)
            .map(|i| Generated {
                id: ProcessorId(i + 1),
                capacity: rng.gen_range(1..=20),
                load: rng.gen_range(0..=25),
                cost_q: rng.gen_range(0..=16),
                heartbeat: rng.gen_bool(0.85).then(|| now - rng.gen_range(0..=3_000)),
            })
            .collect();
        let alpha_tenths = rng.gen_range(0..=10i64);

        // liveness goes through the repository
        let repo = Repository::in_memory();
        for g in &generated {
            repo.register_processor(&ProcessorInfo::new(g.capacity, g.cost_q as f64 / 4.0).with_id(g.id))
                .map_err(err)?;
            if let Some(hb) = g.heartbeat {
                repo.update_processor_status(g.id, g.load, hb).map_err(err)?;
            }
        }
        let live_ids: Vec<ProcessorId> =
            repo.list_available_processors(now, window).into_iter().map(|s| s.id).collect();
        let live: Vec<&Generated> =
            generated.iter().filter(|g| g.heartbeat.is_some_and(|hb| now - hb <= window)).collect();
        let want_ids: Vec<ProcessorId> = live.iter().map(|g| g.id).collect();
        ensure(live_ids == want_ids, || format!("case {case}: live set {live_ids:?}, oracle {want_ids:?}"))?;

        let snapshots: Vec<ProcessorSnapshot> = live
            .iter()
            .map(|g| ProcessorSnapshot {
                id: g.id,
                capacity_total: g.capacity,
                current_load: g.load,
                reported_load: g.load,
                cost_factor: g.cost_q as f64 / 4.0,
                last_heartbeat: g.heartbeat,
            })
            .collect();
        let policies = [
            ("load", SchedulingPolicy::LeastLoad),
            ("cost", SchedulingPolicy::LeastCost),
            ("mixed", SchedulingPolicy::mixed(alpha_tenths as f64 / 10.0).map_err(err)?),
        ];
        for (name, policy) in policies {
            let got = select_target(&policy, &snapshots);
            let want = oracle_pick(name, alpha_tenths, &live);
            ensure(got.target() == want, || format!("case {case} {policy}: got {got:?}, oracle {want:?}"))?;
            if let Selection::Target(t) = got {
                ensure(want_ids.contains(&t), || format!("case {case}: chose unavailable {t}"))?;
            }
            checked += 1;
        }
    }
    let aborted = aborts_without_targets()?;
    Ok(format!("{checked} selections match the exact oracle; {aborted} jobs with no live target ABORTED"))
}

// ---- liveness ---------------------------------------------------------------

fn liveness(_: &mut Collected) -> Verdict {
    let p1 = ProcessorId(1);
    let p2 = ProcessorId(2);
    let mut cluster = Cluster::new(ClusterConfig {
        processors: vec![ProcessorSpec::new(10, 1.0); 2],
        ..ClusterConfig::default()
    })
    .map_err(err)?;
    let workload = WorkloadParams::count(50).map_err(err)?;
    cluster.repo().ensure_definition(JobDefinition::for_workload(workload, Priority::LOW)).map_err(err)?;
    cluster.warm_up(10_000).map_err(err)?;
    let interval = cluster.config().processor.heartbeat_interval_ms;
    let window = cluster.config().liveness_window_ms;
    let tick = cluster.config().tick_ms;
    ensure(window == 3 * interval, || format!("window {window} is not 3 x {interval}"))?;

    let job = |policy| JobRequestOptions::new(workload.definition_id(), Priority::HIGH, policy);
    let mut notes = Vec::new();

    // pause at several phases relative to P2's latest heartbeat
    for phase in [1, interval / 2, interval] {
        let last_hb = |c: &mut Cluster| -> Result<u64, String> {
            c.live_processors().map_err(err)?;
            c.repo().processor(p2).and_then(|s| s.last_heartbeat).ok_or_else(|| "P2 never beat".to_string())
        };
        while cluster.now() - last_hb(&mut cluster)? != phase {
            cluster.step().map_err(err)?;
        }
        let hb = last_hb(&mut cluster)?;
        let paused_at = cluster.now();
        cluster.pause_heartbeats(p2, true);

        let excluded_at = loop {
            let live = cluster.live_processors().map_err(err)?;
            ensure(live.contains(&p1), || format!("P1 dropped out at {}", cluster.now()))?;
            if !live.contains(&p2) {
                break cluster.now();
            }
            ensure(cluster.now() - paused_at <= 2 * window, || "P2 never excluded".into())?;
            cluster.step().map_err(err)?;
        };
        ensure(excluded_at == hb + window + 1, || {
            format!("phase {phase}: excluded at {excluded_at}, expected {}", hb + window + 1)
        })?;
        ensure(excluded_at - paused_at <= 3 * interval, || {
            format!("phase {phase}: exclusion took {} ms after heartbeats stopped", excluded_at - paused_at)
        })?;

        // the scheduler no longer picks P2, even when it is the emptier node
        let pinned = cluster.submit(&job(SchedulingPolicy::Affinity(p2))).map_err(err)?;
        let spread: Vec<_> = (0..4)
            .map(|_| cluster.submit(&job(SchedulingPolicy::LeastLoad)))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        cluster.run_until_settled(100_000, |_| Ok(())).map_err(err)?;
        let pinned = cluster.repo().job(pinned).ok_or("pinned job missing")?;
        ensure(pinned.status == JobStatus::Aborted, || format!("affinity to a dead node ended {}", pinned.status))?;
        for id in spread {
            let j = cluster.repo().job(id).ok_or("job missing")?;
            ensure(j.status == JobStatus::Completed && j.target == Some(p1), || {
                format!("job {id} ended {} on {:?} while P2 was excluded", j.status, j.target)
            })?;
        }

        let resumed_at = cluster.now();
        cluster.pause_heartbeats(p2, false);
        let included_at = loop {
            cluster.step().map_err(err)?;
            if cluster.live_processors().map_err(err)?.contains(&p2) {
                break cluster.now();
            }
            ensure(cluster.now() - resumed_at <= 2 * interval, || "P2 never came back".into())?;
        };
        ensure(included_at == resumed_at + tick, || {
            format!("phase {phase}: back at {included_at}, expected {}", resumed_at + tick)
        })?;
        let back = cluster.submit(&job(SchedulingPolicy::Affinity(p2))).map_err(err)?;
        cluster.run_until_settled(100_000, |_| Ok(())).map_err(err)?;
        let back = cluster.repo().job(back).ok_or("job missing")?;
        ensure(back.status == JobStatus::Completed && back.target == Some(p2), || {
            format!("affinity job after resumption ended {} on {:?}", back.status, back.target)
        })?;
        notes.push(format!("{}", excluded_at - paused_at));
    }
    Ok(format!(
        "excluded exactly {} ms after the last heartbeat (after {} ms of silence), selectable again one tick after resuming",
        window + 1,
        notes.join("/")
    ))
}

// ---- runner -----------------------------------------------------------------

struct Criterion {
    number: usize,
    name: &'static str,
    budget: Option<Duration>,
    check: fn(&mut Collected) -> Verdict,
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    // order matters: later checks reuse the reports of earlier runs
    let criteria = [
        Criterion { number: 2, name: "priority effect on fixed work", budget: secs(120), check: experiment1 },
        Criterion { number: 3, name: "priority effect on fixed time", budget: secs(120), check: experiment2 },
        Criterion { number: 4, name: "scheduler vs sender-initiated", budget: secs(180), check: comparison },
        Criterion { number: 5, name: "broker durability", budget: secs(60), check: broker_durability },
        Criterion { number: 6, name: "scheduler policy oracle", budget: secs(30), check: scheduler_oracle },
        Criterion { number: 7, name: "heartbeat liveness", budget: None, check: liveness },
        Criterion { number: 8, name: "horizontal scaling", budget: None, check: group2 },
        Criterion { number: 9, name: "determinism", budget: None, check: determinism },
        Criterion { number: 1, name: "wait + processing = total", budget: None, check: additivity },
    ];

    let mut collected = Collected::default();
    let mut lines = Vec::new();
    for c in criteria {
        let started = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(|| (c.check)(&mut collected)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let elapsed = started.elapsed();
        let verdict = match (verdict, c.budget) {
            (Ok(d), Some(b)) if elapsed > b => Err(format!("{d}; took {elapsed:.1?}, budget {b:?}")),
            (v, _) => v,
        };
        let line = match &verdict {
            Ok(d) => format!("PASS  {}. {} — {} [{:.1?}]", c.number, c.name, d, elapsed),
            Err(d) => format!("FAIL  {}. {} — {} [{:.1?}]", c.number, c.name, d, elapsed),
        };
        eprintln!("{line}");
        lines.push((c.number, verdict.is_ok(), line));
    }

    lines.sort_by_key(|(n, _, _)| *n);
    println!();
    println!("acceptance criteria:");
    for (_, _, line) in &lines {
        println!("{line}");
    }
    let failed = lines.iter().filter(|(_, ok, _)| !ok).count();
    println!("{} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
