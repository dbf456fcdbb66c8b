//! Published single-processor and comparison figures, checked for the
//! identities and ratios the acceptance thresholds are built around.

use jobgrid::harness::{read_jobs_csv, ExperimentReport};

// (wait, processing, total) in ms
const FIXED_WORK_LOW: (u64, u64, u64) = (231_217, 112_141, 343_358);
const FIXED_WORK_HIGH: (u64, u64, u64) = (133_129, 72_955, 206_084);
const SENDER: (u64, u64, u64) = (284_397, 137_933, 422_330);
const PROPOSED: (u64, u64, u64) = (237_549, 134_494, 372_043);
// mean primes found in a fixed time
const FIXED_TIME_PRIMES: (u64, u64) = (349_504, 701_410);

#[test]
fn published_rows_are_additive() {
    for (w, p, t) in [FIXED_WORK_LOW, FIXED_WORK_HIGH, SENDER, PROPOSED] {
        assert_eq!(w + p, t);
    }
}

#[test]
fn published_ratios_sit_inside_the_thresholds() {
    let total_ratio = FIXED_WORK_LOW.2 as f64 / FIXED_WORK_HIGH.2 as f64;
    assert!((total_ratio - 1.666).abs() < 1e-3);
    assert!(total_ratio >= 1.2);

    let primes_ratio = FIXED_TIME_PRIMES.1 as f64 / FIXED_TIME_PRIMES.0 as f64;
    assert!((primes_ratio - 2.007).abs() < 1e-3);
    assert!((primes_ratio - 2.0).abs() <= 0.3);
}

#[test]
fn published_comparison_is_just_under_twelve_percent() {
    let improvement = (SENDER.2 - PROPOSED.2) as f64 / SENDER.2 as f64;
    assert!((improvement - 0.1191).abs() < 1e-4, "{improvement}");
}

#[test]
fn report_round_trip_keeps_the_identity() {
    let csv = "job_id,priority,target,wait_ms,processing_ms,total_ms,primes\n\
               1,low,P1,231217,112141,343358,20000\n\
               2,high,P1,133129,72955,206084,20000\n";
    let rows = read_jobs_csv(csv.as_bytes()).unwrap();
    let report = ExperimentReport { rows, ..ExperimentReport::empty() };
    assert!(report.additivity_violations().is_empty());
    assert_eq!(report.overall().mean_total_ms, (343_358.0 + 206_084.0) / 2.0);
}
