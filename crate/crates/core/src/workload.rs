//! Prime-computation workloads, written as resumable chunks so a processor
//! can interleave many jobs under weighted slicing.
//!
//! Primality uses trial division on purpose: it is the CPU-bound job body.
//! [`nth_prime_oracle`] uses a sieve instead and exists for cross-checking.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Candidate integers examined per slice unless configured otherwise.
pub const DEFAULT_SLICE_BUDGET: u64 = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("workload already finished")]
    AlreadyFinished,
    #[error("prime target must be at least 1")]
    ZeroTarget,
    #[error("timed workload needs a positive duration")]
    ZeroDuration,
    #[error("unrecognised workload definition `{0}`")]
    UnknownDefinition(String),
    #[error("n = {n} is beyond the oracle bound {max}")]
    OracleBound { n: u64, max: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkloadKind {
    PrimeCount,
    PrimeTimed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimeCountParams {
    pub target_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimeTimedParams {
    pub duration_ms: u64,
}

/// What a job computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "workload_kind", content = "workload_params", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkloadParams {
    PrimeCount(PrimeCountParams),
    PrimeTimed(PrimeTimedParams),
}

impl WorkloadParams {
    pub fn count(target_count: u64) -> Result<Self, WorkloadError> {
        if target_count == 0 {
            return Err(WorkloadError::ZeroTarget);
        }
        Ok(WorkloadParams::PrimeCount(PrimeCountParams { target_count }))
    }

    pub fn timed(duration_ms: u64) -> Result<Self, WorkloadError> {
        if duration_ms == 0 {
            return Err(WorkloadError::ZeroDuration);
        }
        Ok(WorkloadParams::PrimeTimed(PrimeTimedParams { duration_ms }))
    }

    pub fn kind(&self) -> WorkloadKind {
        match self {
            WorkloadParams::PrimeCount(_) => WorkloadKind::PrimeCount,
            WorkloadParams::PrimeTimed(_) => WorkloadKind::PrimeTimed,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        match *self {
            WorkloadParams::PrimeCount(p) => Self::count(p.target_count).map(drop),
            WorkloadParams::PrimeTimed(p) => Self::timed(p.duration_ms).map(drop),
        }
    }

    /// Canonical definition id: `primes-count:<n>` or `primes-timed:<ms>`.
    pub fn definition_id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for WorkloadParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkloadParams::PrimeCount(p) => write!(f, "primes-count:{}", p.target_count),
            WorkloadParams::PrimeTimed(p) => write!(f, "primes-timed:{}", p.duration_ms),
        }
    }
}

impl FromStr for WorkloadParams {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || WorkloadError::UnknownDefinition(s.to_string());
        let (kind, arg) = s.trim().split_once(':').ok_or_else(bad)?;
        let n: u64 = arg.parse().map_err(|_| bad())?;
        match kind {
            "primes-count" => Self::count(n),
            "primes-timed" => Self::timed(n),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimeResult {
    pub count: u64,
    pub largest: u64,
    pub chunks_executed: u64,
}

pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    if n < 4 {
        return true;
    }
    if n.is_multiple_of(2) {
        return false;
    }
    let mut d = 3;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 2;
    }
    true
}

/// Resumable prime search state for one job.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrimeSearch {
    params: WorkloadParams,
    next_candidate: u64,
    result: PrimeResult,
    finished: bool,
}

impl PrimeSearch {
    pub fn new(params: WorkloadParams) -> Self {
        Self { params, next_candidate: 2, result: PrimeResult::default(), finished: false }
    }

    pub fn params(&self) -> WorkloadParams {
        self.params
    }

    pub fn result(&self) -> PrimeResult {
        self.result
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Examines at most `budget` further candidates. Returns `true` once the
    /// target count is reached; a timed search only ends through [`finish`].
    ///
    /// [`finish`]: PrimeSearch::finish
    pub fn run_chunk(&mut self, budget: u64) -> Result<bool, WorkloadError> {
        if self.finished {
            return Err(WorkloadError::AlreadyFinished);
        }
        let target = match self.params {
            WorkloadParams::PrimeCount(p) => Some(p.target_count),
            WorkloadParams::PrimeTimed(_) => None,
        };
        self.result.chunks_executed += 1;
        for _ in 0..budget {
            let n = self.next_candidate;
            self.next_candidate += 1;
            if is_prime(n) {
                self.result.count += 1;
                self.result.largest = n;
                if Some(self.result.count) == target {
                    self.finished = true;
                    break;
                }
            }
        }
        Ok(self.finished)
    }

    /// Ends the search where it stands; used when a timed job's duration elapses.
    pub fn finish(&mut self) {
        self.finished = true;
    }

    /// Fraction complete in `[0, 1]`. Timed searches measure elapsed time.
    pub fn progress(&self, elapsed_ms: u64) -> f64 {
        if self.finished {
            return 1.0;
        }
        let f = match self.params {
            WorkloadParams::PrimeCount(p) => self.result.count as f64 / p.target_count as f64,
            WorkloadParams::PrimeTimed(p) => elapsed_ms as f64 / p.duration_ms as f64,
        };
        f.clamp(0.0, 1.0)
    }
}

/// Largest `n` the sieve oracle accepts.
pub const ORACLE_MAX_N: u64 = 1_000_000;

/// The n-th prime (1-based) by sieve of Eratosthenes.
pub fn nth_prime_oracle(n: u64) -> Result<u64, WorkloadError> {
    if n == 0 || n > ORACLE_MAX_N {
        return Err(WorkloadError::OracleBound { n, max: ORACLE_MAX_N });
    }
    // p_n < n (ln n + ln ln n) for n >= 6
    let bound = if n < 6 {
        15
    } else {
        let x = n as f64;
        (x * (x.ln() + x.ln().ln())).ceil() as usize + 1
    };
    let mut composite = vec![false; bound + 1];
    let mut seen = 0;
    for i in 2..=bound {
        if composite[i] {
            continue;
        }
        seen += 1;
        if seen == n {
            return Ok(i as u64);
        }
        let mut j = i * i;
        while j <= bound {
            composite[j] = true;
            j += i;
        }
    }
    unreachable!("sieve bound too small for n = {n}")
}
