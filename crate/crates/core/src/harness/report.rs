use std::fs;
use std::path::{Path, PathBuf};

use crate::model::{JobId, JobRecord, JobStatus, Priority, ProcessorId};

use super::HarnessError;

pub const JOBS_CSV: &str = "jobs.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const JOBS_HEADER: [&str; 7] = ["job_id", "priority", "target", "wait_ms", "processing_ms", "total_ms", "primes"];
pub const SUMMARY_HEADER: [&str; 8] = [
    "scope",
    "jobs",
    "mean_wait_ms",
    "mean_processing_ms",
    "mean_total_ms",
    "mean_primes",
    "makespan_ms",
    "invalid_jobs",
];

/// One completed job.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JobRow {
    pub job_id: JobId,
    pub priority: Priority,
    pub target: ProcessorId,
    pub wait_ms: u64,
    pub processing_ms: u64,
    pub total_ms: u64,
    pub primes: u64,
}

impl JobRow {
    /// `None` unless the job completed with full timing.
    pub fn from_record(job: &JobRecord) -> Option<Self> {
        if job.status != JobStatus::Completed {
            return None;
        }
        Some(Self {
            job_id: job.id,
            priority: job.priority,
            target: job.target?,
            wait_ms: job.wait_ms?,
            processing_ms: job.processing_ms?,
            total_ms: job.total_ms?,
            primes: job.result_payload.map_or(0, |r| r.count),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub jobs: usize,
    pub mean_wait_ms: f64,
    pub mean_processing_ms: f64,
    pub mean_total_ms: f64,
    pub mean_primes: f64,
}

impl Aggregate {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a JobRow>) -> Self {
        let mut n = 0usize;
        let (mut w, mut p, mut t, mut c) = (0u128, 0u128, 0u128, 0u128);
        for r in rows {
            n += 1;
            w += r.wait_ms as u128;
            p += r.processing_ms as u128;
            t += r.total_ms as u128;
            c += r.primes as u128;
        }
        let mean = |s: u128| if n == 0 { 0.0 } else { s as f64 / n as f64 };
        Self { jobs: n, mean_wait_ms: mean(w), mean_processing_ms: mean(p), mean_total_ms: mean(t), mean_primes: mean(c) }
    }
}

/// A job that did not complete.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InvalidJob {
    pub job_id: JobId,
    pub priority: Priority,
    pub status: JobStatus,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    /// Completed jobs ordered by id.
    pub rows: Vec<JobRow>,
    pub invalid: Vec<InvalidJob>,
    pub dispatched: usize,
    /// First dispatch to last completion.
    pub makespan_ms: u64,
}

impl ExperimentReport {
    pub fn empty() -> Self {
        Self { rows: Vec::new(), invalid: Vec::new(), dispatched: 0, makespan_ms: 0 }
    }

    pub fn from_records(records: &[JobRecord], first_dispatch: Option<u64>) -> Self {
        let mut rows = Vec::new();
        let mut invalid = Vec::new();
        for job in records {
            match JobRow::from_record(job) {
                Some(r) => rows.push(r),
                None => invalid.push(InvalidJob {
                    job_id: job.id,
                    priority: job.priority,
                    status: job.status,
                    error: job.error.clone(),
                }),
            }
        }
        rows.sort_by_key(|r| r.job_id);
        let last = records.iter().filter_map(|j| j.finished_at).max();
        let makespan_ms = match (first_dispatch, last) {
            (Some(a), Some(b)) => b.saturating_sub(a),
            _ => 0,
        };
        Self { rows, invalid, dispatched: records.len(), makespan_ms }
    }

    /// Every dispatched job completed.
    pub fn is_valid(&self) -> bool {
        self.invalid.is_empty() && self.rows.len() == self.dispatched
    }

    pub fn overall(&self) -> Aggregate {
        Aggregate::of(&self.rows)
    }

    pub fn by_priority(&self, p: Priority) -> Aggregate {
        Aggregate::of(self.rows.iter().filter(|r| r.priority == p))
    }

    /// Priorities present, ascending.
    pub fn priorities(&self) -> Vec<Priority> {
        let mut ps: Vec<_> = self.rows.iter().map(|r| r.priority).collect();
        ps.sort();
        ps.dedup();
        ps
    }

    /// Rows whose total differs from wait + processing.
    pub fn additivity_violations(&self) -> Vec<JobId> {
        self.rows.iter().filter(|r| r.total_ms != r.wait_ms + r.processing_ms).map(|r| r.job_id).collect()
    }

    pub fn jobs_csv(&self) -> Result<Vec<u8>, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(JOBS_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.job_id.0.to_string(),
                r.priority.to_string(),
                r.target.to_string(),
                r.wait_ms.to_string(),
                r.processing_ms.to_string(),
                r.total_ms.to_string(),
                r.primes.to_string(),
            ])?;
        }
        finish(w)
    }

    pub fn summary_csv(&self) -> Result<Vec<u8>, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SUMMARY_HEADER)?;
        let mut scopes: Vec<(String, Aggregate)> =
            self.priorities().into_iter().map(|p| (p.to_string(), self.by_priority(p))).collect();
        scopes.push(("all".to_string(), self.overall()));
        for (scope, a) in scopes {
            w.write_record([
                scope,
                a.jobs.to_string(),
                fmt_mean(a.mean_wait_ms),
                fmt_mean(a.mean_processing_ms),
                fmt_mean(a.mean_total_ms),
                fmt_mean(a.mean_primes),
                self.makespan_ms.to_string(),
                self.invalid.len().to_string(),
            ])?;
        }
        finish(w)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, HarnessError> {
    w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))
}

/// Means are written with three decimals so output is stable across runs.
pub fn fmt_mean(x: f64) -> String {
    format!("{x:.3}")
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<PathBuf, HarnessError> {
    fs::write(&path, bytes).map_err(|source| HarnessError::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Writes `jobs.csv` and `summary.csv` under `dir`, creating it if needed.
pub fn emit_report(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, HarnessError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })?;
    Ok(vec![
        write_file(dir.join(JOBS_CSV), &report.jobs_csv()?)?,
        write_file(dir.join(SUMMARY_CSV), &report.summary_csv()?)?,
    ])
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    let raw = rec.get(i).ok_or_else(|| HarnessError::Parse(format!("missing column {}", JOBS_HEADER[i])))?;
    raw.parse().map_err(|e| HarnessError::Parse(format!("{}: `{raw}`: {e}", JOBS_HEADER[i])))
}

/// Parses a `jobs.csv` produced by [`emit_report`].
pub fn read_jobs_csv(bytes: &[u8]) -> Result<Vec<JobRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(bytes);
    if r.headers()?.iter().ne(JOBS_HEADER) {
        return Err(HarnessError::Parse("unexpected jobs.csv header".into()));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(JobRow {
                job_id: JobId(parse_field(&rec, 0)?),
                priority: parse_field(&rec, 1)?,
                target: parse_field(&rec, 2)?,
                wait_ms: parse_field(&rec, 3)?,
                processing_ms: parse_field(&rec, 4)?,
                total_ms: parse_field(&rec, 5)?,
                primes: parse_field(&rec, 6)?,
            })
        })
        .collect()
}

/// One `summary.csv` line.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub scope: String,
    pub jobs: usize,
    pub mean_wait_ms: f64,
    pub mean_processing_ms: f64,
    pub mean_total_ms: f64,
    pub mean_primes: f64,
    pub makespan_ms: u64,
    pub invalid_jobs: usize,
}

pub fn read_summary_csv(bytes: &[u8]) -> Result<Vec<SummaryRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(bytes);
    if r.headers()?.iter().ne(SUMMARY_HEADER) {
        return Err(HarnessError::Parse("unexpected summary.csv header".into()));
    }
    let num = |rec: &csv::StringRecord, i: usize| -> Result<f64, HarnessError> {
        let raw = rec.get(i).unwrap_or_default();
        raw.parse().map_err(|_| HarnessError::Parse(format!("{}: `{raw}`", SUMMARY_HEADER[i])))
    };
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(SummaryRow {
                scope: rec.get(0).unwrap_or_default().to_string(),
                jobs: num(&rec, 1)? as usize,
                mean_wait_ms: num(&rec, 2)?,
                mean_processing_ms: num(&rec, 3)?,
                mean_total_ms: num(&rec, 4)?,
                mean_primes: num(&rec, 5)?,
                makespan_ms: num(&rec, 6)? as u64,
                invalid_jobs: num(&rec, 7)? as usize,
            })
        })
        .collect()
}
