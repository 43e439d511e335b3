//! Metric framework: timestamped sample streams from the backend, an IPC
//! estimate fallback, and external child-process metrics speaking a stdout
//! line protocol.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use crate::machine::SimResult;

/// Environment variable telling an external metric child how long the
/// measured run lasts, in milliseconds.
pub const DURATION_ENV: &str = "EMBER_DURATION_MS";

/// Grace period granted to external metric children past the run duration.
const EXTERNAL_GRACE_MS: u64 = 1000;

/// One timestamped metric reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSample {
    pub timestamp_ms: i64,
    pub value: f64,
}

/// Where a metric's samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSource {
    BackendPower,
    BackendIpc,
    IpcEstimate,
    External,
}

/// Named metric with unit and source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricDescriptor {
    pub name: String,
    pub unit: String,
    pub source: MetricSource,
}

/// Registry of metric descriptors with unique names, fixed at run start.
#[derive(Debug, Clone)]
pub struct MetricRegistry {
    metrics: Vec<MetricDescriptor>,
}

impl MetricRegistry {
    /// The built-in metrics: backend power, backend IPC, and the loop-count
    /// IPC estimate, plus the external child-process slot.
    pub fn builtin() -> Self {
        let mk = |name: &str, unit: &str, source| MetricDescriptor {
            name: name.to_string(),
            unit: unit.to_string(),
            source,
        };
        MetricRegistry {
            metrics: vec![
                mk("power", "W", MetricSource::BackendPower),
                mk("perf-ipc", "instructions/cycle", MetricSource::BackendIpc),
                mk("ipc-estimate", "instructions/cycle", MetricSource::IpcEstimate),
                mk("external", "", MetricSource::External),
            ],
        }
    }

    pub fn get(&self, name: &str) -> Option<&MetricDescriptor> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MetricDescriptor> {
        self.metrics.iter()
    }
}

#[derive(Debug)]
pub enum MetricError {
    /// Stream parameters violate the contract (zero duration or period).
    InvalidWindow { duration_ms: u64, period_ms: u64 },
    ZeroDivisor(&'static str),
    Spawn(std::io::Error),
    /// The metric produced no samples; candidates scored with it are
    /// invalid, never zero.
    Unavailable,
    /// More than 10% of the child's lines failed to parse.
    MalformedStream { malformed: usize, total: usize },
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::InvalidWindow { duration_ms, period_ms } => write!(
                f,
                "metric stream needs positive duration and period (got {duration_ms} ms / {period_ms} ms)"
            ),
            MetricError::ZeroDivisor(what) => write!(f, "ipc estimate: {what} must be positive"),
            MetricError::Spawn(e) => write!(f, "cannot spawn external metric: {e}"),
            MetricError::Unavailable => write!(f, "metric unavailable: no samples received"),
            MetricError::MalformedStream { malformed, total } => write!(
                f,
                "external metric stream malformed: {malformed} of {total} lines rejected"
            ),
        }
    }
}

impl std::error::Error for MetricError {}

fn sampled_stream(
    value: f64,
    duration_ms: u64,
    sample_period_ms: u64,
) -> Result<Vec<MetricSample>, MetricError> {
    if duration_ms == 0 || sample_period_ms == 0 {
        return Err(MetricError::InvalidWindow { duration_ms, period_ms: sample_period_ms });
    }
    let count = duration_ms.div_ceil(sample_period_ms);
    Ok((0..count)
        .map(|k| MetricSample { timestamp_ms: (k * sample_period_ms) as i64, value })
        .collect())
}

/// Constant-power sample stream from the backend's steady-state result:
/// `ceil(duration / period)` samples spaced one period apart, starting at
/// the run origin.
pub fn collect_backend_power(
    result: &SimResult,
    duration_ms: u64,
    sample_period_ms: u64,
) -> Result<Vec<MetricSample>, MetricError> {
    sampled_stream(result.power_w, duration_ms, sample_period_ms)
}

/// Constant-IPC sample stream from the backend's steady-state result.
pub fn collect_backend_ipc(
    result: &SimResult,
    duration_ms: u64,
    sample_period_ms: u64,
) -> Result<Vec<MetricSample>, MetricError> {
    sampled_stream(result.ipc, duration_ms, sample_period_ms)
}

/// IPC estimated from counted inner-loop completions under a constant
/// assumed frequency. If the backend throttled, the estimate is low by
/// exactly `eff_freq / assumed_freq`.
pub fn estimate_ipc(
    loop_iterations: u64,
    unroll: u32,
    instructions_per_set: u32,
    assumed_freq_mhz: u32,
    duration_ms: u64,
) -> Result<f64, MetricError> {
    if assumed_freq_mhz == 0 {
        return Err(MetricError::ZeroDivisor("assumed frequency"));
    }
    if duration_ms == 0 {
        return Err(MetricError::ZeroDivisor("duration"));
    }
    let instructions =
        loop_iterations as f64 * unroll as f64 * instructions_per_set as f64;
    let cycles = assumed_freq_mhz as f64 * 1e3 * duration_ms as f64;
    Ok(instructions / cycles)
}

/// Samples plus line-accounting from one external metric run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalCollection {
    pub samples: Vec<MetricSample>,
    pub lines_total: usize,
    pub lines_malformed: usize,
}

/// Runs an external metric child and parses its stdout line protocol.
///
/// The child is spawned with `EMBER_DURATION_MS` set and must print
/// `<timestamp_ms> <value>` per line (ASCII decimal, single space).
/// Reading stops at EOF or after the duration plus a one second grace,
/// whichever comes first; a child still running past the grace is killed.
/// Lines that do not match the protocol, including timestamps that go
/// backwards, are skipped and counted; a stream that is more than 10%
/// malformed is rejected, and a stream with no valid samples at all is
/// reported unavailable.
pub fn collect_external(
    program: &str,
    args: &[String],
    duration_ms: u64,
) -> Result<ExternalCollection, MetricError> {
    let mut child = Command::new(program)
        .args(args)
        .env(DURATION_ENV, duration_ms.to_string())
        .stdout(Stdio::piped())
        .stdin(Stdio::null())
        .spawn()
        .map_err(MetricError::Spawn)?;

    let stdout = child.stdout.take().expect("stdout piped");
    let (tx, rx) = mpsc::channel::<String>();
    let reader = std::thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            match line {
                Ok(l) => {
                    if tx.send(l).is_err() {
                        break;
                    }
                }
                Err(_) => break,
            }
        }
    });

    let deadline = Instant::now() + Duration::from_millis(duration_ms + EXTERNAL_GRACE_MS);
    let mut samples = Vec::new();
    let mut lines_total = 0usize;
    let mut lines_malformed = 0usize;
    let mut last_ts = i64::MIN;
    loop {
        let now = Instant::now();
        if now >= deadline {
            let _ = child.kill();
            break;
        }
        match rx.recv_timeout(deadline - now) {
            Ok(line) => {
                lines_total += 1;
                match parse_protocol_line(&line) {
                    Some(sample) if sample.timestamp_ms >= last_ts => {
                        last_ts = sample.timestamp_ms;
                        samples.push(sample);
                    }
                    _ => lines_malformed += 1,
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                let _ = child.kill();
                break;
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
    let _ = reader.join();
    let _ = child.wait();

    if samples.is_empty() {
        return Err(MetricError::Unavailable);
    }
    if lines_malformed * 10 > lines_total {
        return Err(MetricError::MalformedStream {
            malformed: lines_malformed,
            total: lines_total,
        });
    }
    Ok(ExternalCollection { samples, lines_total, lines_malformed })
}

/// Parses one `<timestamp_ms> <value>` protocol line.
fn parse_protocol_line(line: &str) -> Option<MetricSample> {
    let (ts, value) = line.split_once(' ')?;
    if ts.is_empty() || !ts.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let timestamp_ms: i64 = ts.parse().ok()?;
    if value.contains(' ') {
        return None;
    }
    let value: f64 = value.parse().ok()?;
    if !value.is_finite() {
        return None;
    }
    Some(MetricSample { timestamp_ms, value })
}
