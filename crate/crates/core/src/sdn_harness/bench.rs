//! Benchmark drivers and report formatting.
//!
//! Measurement (`run_*`) is kept apart from summarization (`summarize_*`,
//! `format_*`) so a fixed sample set always yields the same report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use super::stats::{exclude_above, linear_regression, Regression, Summary};
use super::switch::EcallTotals;
use super::topology::{Datapath, Deployment, HarnessError};
use crate::enclave_tls::{CipherPolicy, EcallKind};
use crate::enrollment::Stage;

pub const DEFAULT_RATE_PPS: u32 = 500;
pub const DEFAULT_CUTOFF_MS: f64 = 2.5;
pub const DEFAULT_COUNT_PER_SIZE: usize = 1000;
pub const DEFAULT_KEYGEN_ITERATIONS: usize = 100;

/// 64 to 1408 bytes in steps of 64: 22 size classes.
pub fn default_sizes() -> Vec<usize> {
    (64..=1408).step_by(64).collect()
}

/// Parses `A:B:STEP` into the inclusive range `A, A+STEP, ..., <= B`.
pub fn parse_sizes(range: &str) -> Result<Vec<usize>, String> {
    let parts: Vec<&str> = range.split(':').collect();
    let [a, b, step] = parts.as_slice() else {
        return Err(format!("expected A:B:STEP, got {range:?}"));
    };
    let num = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    let (a, b, step) = (num(a)?, num(b)?, num(step)?);
    if step == 0 || a > b {
        return Err(format!("empty size range {range:?}"));
    }
    Ok((a..=b).step_by(step).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpuUsage {
    pub rate_pps: u32,
    /// Process CPU time over wall time, in percent (may exceed 100).
    pub utilization_percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeRow {
    pub size: usize,
    /// Over the samples kept after the cutoff, in microseconds.
    pub summary: Option<Summary>,
    pub excluded: usize,
    pub lost: usize,
    pub corrupted: usize,
    pub ecalls: Option<EcallTotals>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub rows: Vec<SizeRow>,
    /// Fit of mean RTT (us) against size (bytes).
    pub regression: Option<Regression>,
    pub cpu: Option<CpuUsage>,
}

impl LatencyReport {
    pub fn slope_ns_per_byte(&self) -> Option<f64> {
        self.regression.map(|r| r.slope * 1000.0)
    }
}

/// Applies the cutoff to raw RTTs (us) per size and fits the means.
pub fn summarize_latency(samples: &[(usize, Vec<f64>)], cutoff_ms: f64) -> LatencyReport {
    let rows: Vec<SizeRow> = samples
        .iter()
        .map(|(size, rtts)| {
            let (kept, excluded) = exclude_above(rtts, cutoff_ms * 1000.0);
            SizeRow {
                size: *size,
                summary: Summary::of(&kept),
                excluded,
                lost: 0,
                corrupted: 0,
                ecalls: None,
            }
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| r.summary.map(|s| (r.size as f64, s.mean)))
        .unzip();
    LatencyReport {
        regression: linear_regression(&xs, &ys),
        rows,
        cpu: None,
    }
}

/// Process CPU time from `/proc/self/stat`, assuming 100 ticks per second.
fn process_cpu_time() -> Option<Duration> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    let after = &stat[stat.rfind(')')? + 2..];
    let fields: Vec<&str> = after.split_whitespace().collect();
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    Some(Duration::from_millis((utime + stime) * 10))
}

pub fn run_latency_benchmark(
    datapath: &mut Datapath,
    sizes: &[usize],
    rate_pps: u32,
    count_per_size: usize,
    outlier_cutoff_ms: f64,
) -> Result<LatencyReport, HarnessError> {
    if sizes.is_empty() || count_per_size == 0 {
        return Err(HarnessError::Config("no sizes or zero count".into()));
    }
    if outlier_cutoff_ms.is_nan() || outlier_cutoff_ms <= 0.0 {
        return Err(HarnessError::Config(format!("cutoff {outlier_cutoff_ms} ms")));
    }
    // Warm the MAC table so the sweep measures unicast forwarding.
    datapath.run_traffic(sizes[0], 0, 1)?;
    datapath.take_ecall_totals()?;

    let cpu_start = process_cpu_time();
    let wall = Instant::now();
    let mut raw = Vec::with_capacity(sizes.len());
    let mut extras = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let report = datapath.run_traffic(size, rate_pps, count_per_size)?;
        if report.samples.is_empty() {
            return Err(HarnessError::TopologyDown(format!("no echoes for {size}-byte frames")));
        }
        let ecalls = datapath.take_ecall_totals()?;
        raw.push((size, report.samples.iter().map(|s| s.rtt_us).collect::<Vec<_>>()));
        extras.push((report.lost, report.corrupted, (ecalls.frames > 0).then_some(ecalls)));
    }
    let cpu = match (cpu_start, process_cpu_time()) {
        (Some(a), Some(b)) => Some(CpuUsage {
            rate_pps,
            utilization_percent: (b - a).as_secs_f64() / wall.elapsed().as_secs_f64() * 100.0,
        }),
        _ => None,
    };
    let mut out = summarize_latency(&raw, outlier_cutoff_ms);
    for (row, (lost, corrupted, ecalls)) in out.rows.iter_mut().zip(extras) {
        row.lost = lost;
        row.corrupted = corrupted;
        row.ecalls = ecalls;
    }
    out.cpu = cpu;
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnrollmentBenchmark {
    /// Time from init until key and certificate are installed, seconds.
    pub init_seconds: Vec<f64>,
    pub stage_seconds: BTreeMap<Stage, Vec<f64>>,
}

impl EnrollmentBenchmark {
    pub fn init_summary(&self) -> Option<Summary> {
        Summary::of(&self.init_seconds)
    }

    pub fn stage_summaries(&self) -> BTreeMap<Stage, Summary> {
        self.stage_seconds
            .iter()
            .filter_map(|(s, v)| Summary::of(v).map(|sum| (*s, sum)))
            .collect()
    }
}

/// Initializes `iterations` fresh compartments against the deployment.
pub fn run_enrollment_benchmark(
    deployment: &Deployment,
    iterations: usize,
    policy: &CipherPolicy,
) -> Result<EnrollmentBenchmark, HarnessError> {
    let mut out = EnrollmentBenchmark::default();
    for i in 0..iterations {
        let c = deployment.new_compartment(&format!("bench-{i}"), false);
        let report = c.library_init(deployment.ca_addr(), deployment.agent_endpoint(), policy.clone())?;
        out.init_seconds.push(report.elapsed.as_secs_f64());
        let timings = report.session.stage_timings().expect("terminal session");
        for (stage, d) in timings {
            out.stage_seconds.entry(stage).or_default().push(d.as_secs_f64());
        }
    }
    Ok(out)
}

pub const LATENCY_COLUMNS: [&str; 7] = [
    "size_bytes",
    "mean_us",
    "variance",
    "q1_us",
    "median_us",
    "q3_us",
    "excluded_count",
];
pub const REGRESSION_COLUMNS: [&str; 3] = ["intercept_us", "slope_ns_per_byte", "residual_rms_us"];
pub const KEYGEN_ROWS: [&str; 5] = ["Mean", "Variance", "1st Quartile", "Median", "3rd Quartile"];
pub const ECALL_COLUMNS: [&str; 6] = ["Size (b)", "read", "write", "get_state", "get_error", "Total enclave access"];
pub const ATTESTATION_COLUMNS: [&str; 4] = ["Stage", "Mean", "Variance", "Median"];

/// Per-size latency table followed by the regression line.
pub fn format_latency(report: &LatencyReport) -> String {
    let mut s = LATENCY_COLUMNS.join("\t");
    s.push('\n');
    for r in &report.rows {
        match &r.summary {
            Some(m) => writeln!(
                s,
                "{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{}",
                r.size, m.mean, m.variance, m.q1, m.median, m.q3, r.excluded
            ),
            None => writeln!(s, "{}\tNA\tNA\tNA\tNA\tNA\t{}", r.size, r.excluded),
        }
        .expect("write to string");
    }
    s.push('\n');
    s.push_str(&REGRESSION_COLUMNS.join("\t"));
    s.push('\n');
    match report.regression {
        Some(g) => writeln!(s, "{:.3}\t{:.3}\t{:.3}", g.intercept, g.slope * 1000.0, g.residual_rms),
        None => writeln!(s, "NA\tNA\tNA"),
    }
    .expect("write to string");
    s
}

/// Box-plot geometry per size, microseconds.
pub fn format_boxplot(report: &LatencyReport) -> String {
    let mut s = String::from("size_bytes\tlower_whisker_us\tq1_us\tmedian_us\tq3_us\tupper_whisker_us\n");
    for r in &report.rows {
        if let Some(m) = &r.summary {
            writeln!(
                s,
                "{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}",
                r.size, m.lower_whisker, m.q1, m.median, m.q3, m.upper_whisker
            )
            .expect("write to string");
        }
    }
    s
}

/// Keys and certificate generation time.
pub fn format_keygen(summary: &Summary) -> String {
    let values = [summary.mean, summary.variance, summary.q1, summary.median, summary.q3];
    let mut s = String::from("Statistic\tValue\n");
    for (i, (label, v)) in KEYGEN_ROWS.iter().zip(values).enumerate() {
        if i == 1 {
            writeln!(s, "{label}\t{v:.4}")
        } else {
            writeln!(s, "{label}\t{v:.3} seconds")
        }
        .expect("write to string");
    }
    s
}

fn ms(d: Option<Duration>) -> String {
    d.map_or_else(|| "NA".to_string(), |d| format!("{:.4}", d.as_secs_f64() * 1000.0))
}

/// Mean duration of each ECALL and total ECALL time per round trip, in
/// milliseconds. A round trip crosses the switch twice.
pub fn format_ecalls(report: &LatencyReport) -> String {
    let mut s = ECALL_COLUMNS.join("\t");
    s.push('\n');
    for r in &report.rows {
        let Some(t) = &r.ecalls else { continue };
        let per_round_trip = (t.frames > 0).then(|| t.total_time() * 2 / t.frames as u32);
        let cols: Vec<String> = EcallKind::ALL.iter().map(|&k| ms(t.mean_call(k))).collect();
        writeln!(s, "{}\t{}\t{}", r.size, cols.join("\t"), ms(per_round_trip)).expect("write to string");
    }
    s
}

/// Attestation time per stage, seconds.
pub fn format_attestation(stages: &BTreeMap<Stage, Summary>) -> String {
    let mut s = ATTESTATION_COLUMNS.join("\t");
    s.push('\n');
    for stage in Stage::REPORTED {
        match stages.get(&stage) {
            Some(m) => writeln!(s, "{}\t{:.3} s\t{:.6}\t{:.3} s", stage.label(), m.mean, m.variance, m.median),
            None => writeln!(s, "{}\tNA\tNA\tNA", stage.label()),
        }
        .expect("write to string");
    }
    s
}

pub fn format_cpu(cpu: &CpuUsage) -> String {
    format!("Packet Rate\tCPU utilization\n{} pps\t{:.0}%\n", cpu.rate_pps, cpu.utilization_percent)
}
