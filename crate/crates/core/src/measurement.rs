//! Turns metric sample streams into scalar objectives by trimming the
//! start/stop deltas and averaging, and writes CSV summaries.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::metrics::MetricSample;

/// Run duration with leading and trailing exclusions, all in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeasurementWindow {
    pub total_ms: u64,
    pub start_delta_ms: u64,
    pub stop_delta_ms: u64,
}

/// Default measurement exclusions: 5 s leading, 2 s trailing.
pub const DEFAULT_START_DELTA_MS: u64 = 5000;
pub const DEFAULT_STOP_DELTA_MS: u64 = 2000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MeasurementError {
    /// `start_delta_ms + stop_delta_ms` must stay below `total_ms`.
    BadWindow(MeasurementWindow),
    /// No samples fell inside the window; propagates metric-unavailable
    /// semantics.
    EmptyWindow,
    Io(String),
}

impl fmt::Display for MeasurementError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeasurementError::BadWindow(w) => write!(
                f,
                "window deltas {} + {} ms do not fit in {} ms total",
                w.start_delta_ms, w.stop_delta_ms, w.total_ms
            ),
            MeasurementError::EmptyWindow => write!(f, "no samples inside measurement window"),
            MeasurementError::Io(e) => write!(f, "cannot write summary: {e}"),
        }
    }
}

impl std::error::Error for MeasurementError {}

impl MeasurementWindow {
    pub fn new(
        total_ms: u64,
        start_delta_ms: u64,
        stop_delta_ms: u64,
    ) -> Result<Self, MeasurementError> {
        let w = MeasurementWindow { total_ms, start_delta_ms, stop_delta_ms };
        if start_delta_ms + stop_delta_ms >= total_ms {
            return Err(MeasurementError::BadWindow(w));
        }
        Ok(w)
    }
}

/// Arithmetic mean of the samples with
/// `run_start + start_delta <= t <= run_start + total - stop_delta`,
/// both boundaries inclusive.
pub fn window_average(
    samples: &[MetricSample],
    window: &MeasurementWindow,
    run_start_ms: i64,
) -> Result<f64, MeasurementError> {
    let lo = run_start_ms + window.start_delta_ms as i64;
    let hi = run_start_ms + window.total_ms as i64 - window.stop_delta_ms as i64;
    let mut sum = 0.0;
    let mut count = 0u64;
    for s in samples {
        if s.timestamp_ms >= lo && s.timestamp_ms <= hi {
            sum += s.value;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MeasurementError::EmptyWindow);
    }
    Ok(sum / count as f64)
}

/// Number of samples inside the window (the `samples` CSV column).
pub fn window_sample_count(
    samples: &[MetricSample],
    window: &MeasurementWindow,
    run_start_ms: i64,
) -> u64 {
    let lo = run_start_ms + window.start_delta_ms as i64;
    let hi = run_start_ms + window.total_ms as i64 - window.stop_delta_ms as i64;
    samples.iter().filter(|s| s.timestamp_ms >= lo && s.timestamp_ms <= hi).count() as u64
}

/// Formats with the given number of significant digits, never in exponent
/// notation; the stable form used in CSV output and optimizer logs.
pub fn format_significant(value: f64, digits: u32) -> String {
    if value.is_nan() {
        return "nan".to_string();
    }
    if value.is_infinite() {
        return if value > 0.0 { "inf".to_string() } else { "-inf".to_string() };
    }
    if value == 0.0 {
        return format!("{:.*}", digits.saturating_sub(1) as usize, 0.0);
    }
    let magnitude = value.abs().log10().floor() as i32;
    let decimals = (digits as i32 - (magnitude + 1)).max(0) as usize;
    format!("{value:.decimals$}")
}

/// One summary row: label, metric name, windowed mean, in-window samples.
pub type SummaryRow = (String, String, f64, u64);

/// Renders the CSV summary: `label,metric,mean,samples` header, one row per
/// entry, means with six significant digits, LF line endings. Byte-stable
/// for equal inputs.
pub fn render_csv_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::from("label,metric,mean,samples\n");
    for (label, metric, mean, samples) in rows {
        out.push_str(label);
        out.push(',');
        out.push_str(metric);
        out.push(',');
        out.push_str(&format_significant(*mean, 6));
        out.push(',');
        out.push_str(&samples.to_string());
        out.push('\n');
    }
    out
}

/// Writes [`render_csv_summary`] output to `path`.
pub fn write_csv_summary(rows: &[SummaryRow], path: &Path) -> Result<(), MeasurementError> {
    let text = render_csv_summary(rows);
    let mut file =
        std::fs::File::create(path).map_err(|e| MeasurementError::Io(e.to_string()))?;
    file.write_all(text.as_bytes()).map_err(|e| MeasurementError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(t: i64, v: f64) -> MetricSample {
        MetricSample { timestamp_ms: t, value: v }
    }

    #[test]
    fn single_in_window_sample() {
        let samples = [s(0, 100.0), s(1000, 200.0), s(2000, 300.0)];
        let w = MeasurementWindow::new(2000, 500, 500).unwrap();
        assert_eq!(window_average(&samples, &w, 0).unwrap(), 200.0);
    }

    #[test]
    fn paper_shaped_window() {
        // 240 s total, skip first 120 s and last 2 s, constant 300
        let samples: Vec<_> = (0..4800).map(|k| s(k * 50, 300.0)).collect();
        let w = MeasurementWindow::new(240_000, 120_000, 2000).unwrap();
        assert_eq!(window_average(&samples, &w, 0).unwrap(), 300.0);
        assert_eq!(window_sample_count(&samples, &w, 0), 2361);
    }

    #[test]
    fn boundaries_inclusive_both_ends() {
        let w = MeasurementWindow::new(1000, 100, 100).unwrap();
        // run start 50: window is [150, 950]
        let samples = [s(149, 1.0), s(150, 2.0), s(950, 4.0), s(951, 8.0)];
        assert_eq!(window_average(&samples, &w, 50).unwrap(), 3.0);
    }

    #[test]
    fn empty_window_unavailable() {
        let w = MeasurementWindow::new(1000, 400, 400).unwrap();
        let samples = [s(0, 1.0), s(999, 1.0)];
        assert!(matches!(
            window_average(&samples, &w, 0),
            Err(MeasurementError::EmptyWindow)
        ));
    }

    #[test]
    fn window_invariant() {
        assert!(MeasurementWindow::new(1000, 600, 400).is_err());
        assert!(MeasurementWindow::new(1000, 500, 400).is_ok());
    }

    #[test]
    fn mean_reorder_invariant() {
        let w = MeasurementWindow::new(100, 0, 0).unwrap();
        let a = [s(1, 1.0), s(2, 5.0), s(3, 9.0)];
        let b = [s(3, 9.0), s(1, 1.0), s(2, 5.0)];
        assert_eq!(window_average(&a, &w, 0).unwrap(), window_average(&b, &w, 0).unwrap());
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_significant(300.0, 6), "300.000");
        assert_eq!(format_significant(3.4, 6), "3.40000");
        assert_eq!(format_significant(2360.5, 6), "2360.50");
        assert_eq!(format_significant(0.00123, 6), "0.00123000");
        assert_eq!(format_significant(-41.25, 6), "-41.2500");
        assert_eq!(format_significant(1234567.0, 6), "1234567");
        assert_eq!(format_significant(0.0, 6), "0.00000");
        assert_eq!(format_significant(f64::NAN, 6), "nan");
    }

    #[test]
    fn csv_golden_row() {
        let rows = vec![("run1".to_string(), "power".to_string(), 300.0, 2360)];
        assert_eq!(
            render_csv_summary(&rows),
            "label,metric,mean,samples\nrun1,power,300.000,2360\n"
        );
    }

    #[test]
    fn csv_header_only() {
        assert_eq!(render_csv_summary(&[]), "label,metric,mean,samples\n");
    }

    #[test]
    fn csv_write_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ("a".to_string(), "power".to_string(), 437.123456, 100),
            ("b".to_string(), "perf-ipc".to_string(), 3.4, 100),
        ];
        let p1 = dir.path().join("one.csv");
        let p2 = dir.path().join("two.csv");
        write_csv_summary(&rows, &p1).unwrap();
        write_csv_summary(&rows, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
