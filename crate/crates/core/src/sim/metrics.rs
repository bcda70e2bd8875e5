// SPDX-License-Identifier: Apache-2.0

//! Per-window metrics and their CSV / JSON renderings.

use std::io::Write;

use serde::Serialize;

use crate::ids::FunctionId;

pub const SCHEMA_VERSION: u32 = 1;

/// A finished request. Latency covers queueing, service and any time the
/// serving pod spent waiting for its next token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletedRequest {
    pub arrival_ms: f64,
    pub start_ms: f64,
    pub finish_ms: f64,
}

pub fn latency_of(req: &CompletedRequest) -> f64 {
    req.finish_ms - req.arrival_ms
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionWindow {
    pub function_id: FunctionId,
    pub arrivals: u64,
    pub completions: u64,
    pub slo_violations: u64,
    pub dropped: u64,
    pub queue_depth: u64,
    pub pods: u64,
}

impl FunctionWindow {
    /// Violations over completions, in percent.
    pub fn violation_pct(&self) -> f64 {
        if self.completions == 0 {
            0.0
        } else {
            100.0 * self.slo_violations as f64 / self.completions as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpuWindow {
    pub gpu_id: usize,
    /// Fraction of the window during which any token was live.
    pub utilization: f64,
    /// Time-weighted SM share held by live tokens.
    pub sm_occupancy: f64,
    pub memory_mb: u64,
    pub pods: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowMetrics {
    pub window: u32,
    pub functions: Vec<FunctionWindow>,
    pub gpus: Vec<GpuWindow>,
    pub gpus_in_use: u64,
    pub placement_failures: u64,
    pub fragmentation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionSummary {
    pub function_id: FunctionId,
    pub arrivals: u64,
    pub completions: u64,
    pub slo_violations: u64,
    pub dropped: u64,
    /// Requests still queued or in service when the run ended.
    pub backlog: u64,
    pub violation_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub policy: String,
    pub windows: u32,
    pub window_ms: u32,
    pub seed: u64,
    pub arrivals: u64,
    pub completions: u64,
    pub slo_violations: u64,
    pub violation_pct: f64,
    pub dropped: u64,
    pub backlog: u64,
    pub peak_gpus_in_use: u64,
    pub mean_gpus_in_use: f64,
    /// Averaged over every (open GPU, window) pair.
    pub mean_utilization: f64,
    pub mean_sm_occupancy: f64,
    pub placement_failures: u64,
    pub functions: Vec<FunctionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub summary: Summary,
    pub windows: Vec<WindowMetrics>,
}

pub const CSV_COLUMNS: [&str; 15] = [
    "window",
    "scope",
    "id",
    "arrivals",
    "completions",
    "slo_violations",
    "dropped",
    "queue_depth",
    "pods",
    "utilization",
    "sm_occupancy",
    "memory_mb",
    "gpus_in_use",
    "placement_failures",
    "fragmentation",
];

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

impl MetricsReport {
    /// One row per function, per open GPU and one global row for every
    /// window. Floats use six fixed decimals so output is byte-stable.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for win in &self.windows {
            let n = win.window.to_string();
            for f in &win.functions {
                w.write_record([
                    n.as_str(),
                    "function",
                    f.function_id.as_str(),
                    &f.arrivals.to_string(),
                    &f.completions.to_string(),
                    &f.slo_violations.to_string(),
                    &f.dropped.to_string(),
                    &f.queue_depth.to_string(),
                    &f.pods.to_string(),
                    "",
                    "",
                    "",
                    "",
                    "",
                    "",
                ])?;
            }
            for g in &win.gpus {
                w.write_record([
                    n.as_str(),
                    "gpu",
                    &g.gpu_id.to_string(),
                    "",
                    "",
                    "",
                    "",
                    "",
                    &g.pods.to_string(),
                    &f6(g.utilization),
                    &f6(g.sm_occupancy),
                    &g.memory_mb.to_string(),
                    "",
                    "",
                    "",
                ])?;
            }
            w.write_record([
                n.as_str(),
                "global",
                "",
                "",
                "",
                "",
                "",
                "",
                "",
                "",
                "",
                "",
                &win.gpus_in_use.to_string(),
                &win.placement_failures.to_string(),
                &f6(win.fragmentation),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }

    /// Per-window violation percentage of one function.
    pub fn violation_series(&self, function_id: &FunctionId) -> Vec<f64> {
        self.windows
            .iter()
            .map(|w| {
                w.functions
                    .iter()
                    .find(|f| &f.function_id == function_id)
                    .map_or(0.0, FunctionWindow::violation_pct)
            })
            .collect()
    }
}

/// Folds per-window rows into the run summary.
pub(crate) fn summarize(
    windows: &[WindowMetrics],
    policy: &str,
    window_ms: u32,
    seed: u64,
    backlog: &[(FunctionId, u64)],
) -> Summary {
    let mut functions: Vec<FunctionSummary> = backlog
        .iter()
        .map(|(id, b)| FunctionSummary {
            function_id: id.clone(),
            arrivals: 0,
            completions: 0,
            slo_violations: 0,
            dropped: 0,
            backlog: *b,
            violation_pct: 0.0,
        })
        .collect();
    let (mut util, mut occ, mut gpu_windows) = (0.0, 0.0, 0u64);
    let (mut peak, mut gpu_sum, mut failures) = (0u64, 0u64, 0u64);
    for w in windows {
        for (acc, f) in functions.iter_mut().zip(&w.functions) {
            acc.arrivals += f.arrivals;
            acc.completions += f.completions;
            acc.slo_violations += f.slo_violations;
            acc.dropped += f.dropped;
        }
        for g in &w.gpus {
            util += g.utilization;
            occ += g.sm_occupancy;
            gpu_windows += 1;
        }
        peak = peak.max(w.gpus_in_use);
        gpu_sum += w.gpus_in_use;
        failures += w.placement_failures;
    }
    let pct = |v: u64, c: u64| if c == 0 { 0.0 } else { 100.0 * v as f64 / c as f64 };
    for f in &mut functions {
        f.violation_pct = pct(f.slo_violations, f.completions);
    }
    let arrivals = functions.iter().map(|f| f.arrivals).sum();
    let completions = functions.iter().map(|f| f.completions).sum();
    let slo_violations = functions.iter().map(|f| f.slo_violations).sum();
    let mean = |v: f64, n: u64| if n == 0 { 0.0 } else { v / n as f64 };
    Summary {
        schema_version: SCHEMA_VERSION,
        policy: policy.to_string(),
        windows: windows.len() as u32,
        window_ms,
        seed,
        arrivals,
        completions,
        slo_violations,
        violation_pct: pct(slo_violations, completions),
        dropped: functions.iter().map(|f| f.dropped).sum(),
        backlog: functions.iter().map(|f| f.backlog).sum(),
        peak_gpus_in_use: peak,
        mean_gpus_in_use: mean(gpu_sum as f64, windows.len() as u64),
        mean_utilization: mean(util, gpu_windows),
        mean_sm_occupancy: mean(occ, gpu_windows),
        placement_failures: failures,
        functions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        let windows = vec![WindowMetrics {
            window: 0,
            functions: vec![FunctionWindow {
                function_id: "f".into(),
                arrivals: 10,
                completions: 8,
                slo_violations: 2,
                dropped: 0,
                queue_depth: 2,
                pods: 1,
            }],
            gpus: vec![GpuWindow {
                gpu_id: 0,
                utilization: 0.5,
                sm_occupancy: 1.0 / 3.0,
                memory_mb: 1324,
                pods: 1,
            }],
            gpus_in_use: 1,
            placement_failures: 0,
            fragmentation: 0.0,
        }];
        let summary = summarize(&windows, "fast", 1000, 0, &[("f".into(), 2)]);
        MetricsReport { summary, windows }
    }

    #[test]
    fn latency_spans_arrival_to_finish() {
        let r = CompletedRequest {
            arrival_ms: 10.0,
            start_ms: 25.0,
            finish_ms: 65.0,
        };
        assert_eq!(latency_of(&r), 55.0);
    }

    #[test]
    fn csv_layout() {
        let csv = report().csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("window,scope,id"));
        assert_eq!(lines[2], "0,gpu,0,,,,,,1,0.500000,0.333333,1324,,,");
        assert_eq!(lines[3], "0,global,,,,,,,,,,,1,0,0.000000");
    }

    #[test]
    fn summary_totals() {
        let r = report();
        assert_eq!(r.summary.violation_pct, 25.0);
        assert_eq!(r.summary.backlog, 2);
        assert_eq!(r.summary.mean_utilization, 0.5);
        assert!(r.summary_json().contains("\"schema_version\": 1"));
    }
}
