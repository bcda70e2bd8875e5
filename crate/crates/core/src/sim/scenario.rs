// SPDX-License-Identifier: Apache-2.0

//! Scenario description: fleet, timing, policy and per-function workloads.
//!
//! A [`Scenario`] holds resolved profiles and traces. [`ScenarioFile`] is the
//! JSON form, where profiles are referenced by path (relative to the scenario
//! file) or described synthetically.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::ids::FunctionId;
use crate::memory_model::{MemorySpec, SharingMode, DEFAULT_CAPACITY_MB};
use crate::packer::DEFAULT_RESTRUCTURE_THRESHOLD;
use crate::profiles::{load_profiles, standard_grid, synth_profile, ConfigPoint, FunctionProfile, DEFAULT_SLO_MS};

pub const SCENARIO_VERSION: u32 = 1;

/// How pods are shaped before placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Profiled SM partitions and quotas as chosen by the autoscaler.
    #[default]
    Fast,
    /// Every pod holds all SMs; only the time axis is shared.
    Timeshare,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Fast => "fast",
            Policy::Timeshare => "timeshare",
        }
    }
}

/// Per-window request-rate pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TracePattern {
    /// Explicit arrivals per window; windows past the end get none.
    Counts { counts: Vec<u64> },
    Constant { rps: f64 },
    Step { before_rps: f64, after_rps: f64, at_window: u32 },
    Sinusoid { mean_rps: f64, amplitude_rps: f64, period_windows: f64 },
    /// One integer count per line; `#` starts a comment. Resolved to
    /// `Counts` when the scenario file is loaded.
    Replay { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadTrace {
    #[serde(flatten)]
    pub pattern: TracePattern,
    /// Sample Poisson counts around the pattern's mean instead of rounding.
    #[serde(default)]
    pub poisson: bool,
}

impl WorkloadTrace {
    pub fn constant(rps: f64) -> Self {
        Self {
            pattern: TracePattern::Constant { rps },
            poisson: false,
        }
    }

    pub fn step(before_rps: f64, after_rps: f64, at_window: u32) -> Self {
        Self {
            pattern: TracePattern::Step {
                before_rps,
                after_rps,
                at_window,
            },
            poisson: false,
        }
    }

    pub fn counts(counts: Vec<u64>) -> Self {
        Self {
            pattern: TracePattern::Counts { counts },
            poisson: false,
        }
    }

    fn rate(&self, window: u32) -> f64 {
        match &self.pattern {
            TracePattern::Constant { rps } => *rps,
            TracePattern::Step {
                before_rps,
                after_rps,
                at_window,
            } => {
                if window < *at_window {
                    *before_rps
                } else {
                    *after_rps
                }
            }
            TracePattern::Sinusoid {
                mean_rps,
                amplitude_rps,
                period_windows,
            } => {
                let phase = 2.0 * std::f64::consts::PI * f64::from(window) / period_windows;
                (mean_rps + amplitude_rps * phase.sin()).max(0.0)
            }
            TracePattern::Counts { .. } | TracePattern::Replay { .. } => 0.0,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |what: &str| Err(SimError::InvalidScenario(format!("trace: {what}")));
        match &self.pattern {
            TracePattern::Constant { rps } if !(rps.is_finite() && *rps >= 0.0) => bad("rps must be >= 0"),
            TracePattern::Step {
                before_rps, after_rps, ..
            } if !(before_rps.is_finite() && after_rps.is_finite() && *before_rps >= 0.0 && *after_rps >= 0.0) => {
                bad("step rates must be >= 0")
            }
            TracePattern::Sinusoid {
                mean_rps,
                amplitude_rps,
                period_windows,
            } if !(mean_rps.is_finite() && amplitude_rps.is_finite() && *period_windows > 0.0) => {
                bad("sinusoid needs finite rates and a positive period")
            }
            TracePattern::Replay { path } => bad(&format!("replay {} was not resolved", path.display())),
            _ => Ok(()),
        }
    }

    /// Arrivals per window for `windows` windows of `window_ms`.
    pub fn window_counts(&self, windows: u32, window_ms: u32, seed: u64) -> Vec<u64> {
        if let TracePattern::Counts { counts } = &self.pattern {
            return (0..windows as usize).map(|w| counts.get(w).copied().unwrap_or(0)).collect();
        }
        let window_s = f64::from(window_ms) / 1000.0;
        if self.poisson {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            return (0..windows)
                .map(|w| {
                    let mean = self.rate(w) * window_s;
                    if mean > 0.0 {
                        Poisson::new(mean).map(|d| d.sample(&mut rng) as u64).unwrap_or(0)
                    } else {
                        0
                    }
                })
                .collect();
        }
        // Round the running total so long-run volume matches the rate exactly.
        let mut cumulative = 0.0;
        let mut emitted = 0u64;
        (0..windows)
            .map(|w| {
                cumulative += self.rate(w) * window_s;
                let target = (cumulative + 1e-9).floor() as u64;
                let n = target.saturating_sub(emitted);
                emitted = target.max(emitted);
                n
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FunctionSpec {
    pub profile: Arc<FunctionProfile>,
    pub trace: WorkloadTrace,
    /// Added to the chosen quota to form the pod's quota limit.
    pub elastic_quota: f64,
    /// Queue bound; arrivals beyond it are dropped. `None` is unbounded.
    pub max_queue: Option<usize>,
    /// Seed the first scaling decision with the first window's arrivals and
    /// start those pods warm.
    pub prewarm: bool,
}

impl FunctionSpec {
    pub fn new(profile: FunctionProfile, trace: WorkloadTrace) -> Self {
        Self {
            profile: Arc::new(profile),
            trace,
            elastic_quota: 0.0,
            max_queue: None,
            prewarm: false,
        }
    }

    pub fn function_id(&self) -> &FunctionId {
        self.profile.function_id()
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub fleet_size: usize,
    pub window_ms: u32,
    pub quantum_ms: u32,
    pub epoch_windows: u32,
    pub windows: u32,
    pub seed: u64,
    pub cold_start_windows: u32,
    pub gpu_memory_mb: u64,
    pub sharing: SharingMode,
    pub restructure_threshold: usize,
    pub predictor_windows: usize,
    pub policy: Policy,
    pub functions: Vec<FunctionSpec>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            fleet_size: 4,
            window_ms: 1000,
            quantum_ms: 20,
            epoch_windows: 5,
            windows: 60,
            seed: 0,
            cold_start_windows: 2,
            gpu_memory_mb: DEFAULT_CAPACITY_MB,
            sharing: SharingMode::Shared,
            restructure_threshold: DEFAULT_RESTRUCTURE_THRESHOLD,
            predictor_windows: crate::autoscaler::DEFAULT_PREDICTOR_WINDOWS,
            policy: Policy::Fast,
            functions: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.fleet_size < 1 {
            return bad("fleet_size must be at least 1".into());
        }
        if self.epoch_windows < 1 {
            return bad("epoch_windows must be at least 1".into());
        }
        if self.window_ms < 1 || self.windows < 1 {
            return bad("window_ms and windows must be positive".into());
        }
        if self.quantum_ms < 1 || self.quantum_ms > self.window_ms {
            return bad(format!("quantum_ms must be in [1, {}]", self.window_ms));
        }
        if self.predictor_windows < 1 {
            return bad("predictor_windows must be at least 1".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.functions {
            if !seen.insert(f.function_id().clone()) {
                return bad(format!("function {} listed twice", f.function_id()));
            }
            if f.profile.is_empty() {
                return bad(format!("function {} has an empty profile", f.function_id()));
            }
            if !(f.elastic_quota.is_finite() && f.elastic_quota >= 0.0) {
                return bad(format!("function {}: elastic_quota must be >= 0", f.function_id()));
            }
            f.trace.validate()?;
        }
        Ok(())
    }

    pub fn with_policy(&self, policy: Policy) -> Scenario {
        Scenario {
            policy,
            ..self.clone()
        }
    }

    pub fn from_json_path(path: &Path) -> Result<Scenario, SimError> {
        let text = fs::read_to_string(path)?;
        let file: ScenarioFile = serde_json::from_str(&text)?;
        file.resolve(path.parent().unwrap_or_else(|| Path::new(".")))
    }
}

/// Where a function's profile comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileSource {
    /// A profile file; picks `function_id` from it.
    Path(PathBuf),
    Synthetic(SyntheticProfile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProfile {
    pub t_max: f64,
    pub sm_knee: f64,
    /// `[sm_partition, quota]` pairs; the standard grid when omitted.
    #[serde(default)]
    pub grid: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub slo_ms: Option<f64>,
    #[serde(default)]
    pub memory: Option<MemorySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionFile {
    pub function_id: FunctionId,
    pub profile: ProfileSource,
    pub trace: WorkloadTrace,
    #[serde(default)]
    pub elastic_quota: f64,
    #[serde(default)]
    pub max_queue: Option<usize>,
    #[serde(default)]
    pub prewarm: bool,
}

fn d_fleet() -> usize {
    Scenario::default().fleet_size
}
fn d_window() -> u32 {
    1000
}
fn d_quantum() -> u32 {
    20
}
fn d_epoch() -> u32 {
    5
}
fn d_cold() -> u32 {
    2
}
fn d_mem() -> u64 {
    DEFAULT_CAPACITY_MB
}
fn d_threshold() -> usize {
    DEFAULT_RESTRUCTURE_THRESHOLD
}
fn d_predictor() -> usize {
    crate::autoscaler::DEFAULT_PREDICTOR_WINDOWS
}
fn d_version() -> u32 {
    SCENARIO_VERSION
}

/// JSON scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default = "d_version")]
    pub version: u32,
    #[serde(default = "d_fleet")]
    pub fleet_size: usize,
    #[serde(default = "d_window")]
    pub window_ms: u32,
    #[serde(default = "d_quantum")]
    pub quantum_ms: u32,
    #[serde(default = "d_epoch")]
    pub epoch_windows: u32,
    pub windows: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_cold")]
    pub cold_start_windows: u32,
    #[serde(default = "d_mem")]
    pub gpu_memory_mb: u64,
    #[serde(default)]
    pub sharing: SharingMode,
    #[serde(default = "d_threshold")]
    pub restructure_threshold: usize,
    #[serde(default = "d_predictor")]
    pub predictor_windows: usize,
    #[serde(default)]
    pub policy: Policy,
    pub functions: Vec<FunctionFile>,
}

impl ScenarioFile {
    /// Loads referenced profiles and replay traces relative to `base`.
    pub fn resolve(self, base: &Path) -> Result<Scenario, SimError> {
        if self.version != SCENARIO_VERSION {
            return Err(SimError::InvalidScenario(format!(
                "unsupported scenario version {} (expected {SCENARIO_VERSION})",
                self.version
            )));
        }
        let mut functions = Vec::with_capacity(self.functions.len());
        for f in self.functions {
            let profile = match f.profile {
                ProfileSource::Path(p) => {
                    let path = base.join(p);
                    load_profiles(&path)?
                        .into_iter()
                        .find(|prof| prof.function_id() == &f.function_id)
                        .ok_or_else(|| {
                            SimError::InvalidScenario(format!(
                                "{} has no profile for {}",
                                path.display(),
                                f.function_id
                            ))
                        })?
                }
                ProfileSource::Synthetic(s) => {
                    let grid = match &s.grid {
                        Some(points) => points
                            .iter()
                            .map(|&(sm, q)| ConfigPoint::new(sm, q))
                            .collect::<Result<Vec<_>, _>>()?,
                        None => standard_grid(),
                    };
                    synth_profile(f.function_id.clone(), s.t_max, s.sm_knee, &grid)?
                        .with_slo(s.slo_ms.unwrap_or(DEFAULT_SLO_MS))
                        .with_memory(s.memory.unwrap_or_default())
                }
            };
            let trace = match f.trace.pattern {
                TracePattern::Replay { path } => WorkloadTrace {
                    pattern: TracePattern::Counts {
                        counts: read_replay(&base.join(path))?,
                    },
                    poisson: f.trace.poisson,
                },
                pattern => WorkloadTrace {
                    pattern,
                    poisson: f.trace.poisson,
                },
            };
            functions.push(FunctionSpec {
                profile: Arc::new(profile),
                trace,
                elastic_quota: f.elastic_quota,
                max_queue: f.max_queue,
                prewarm: f.prewarm,
            });
        }
        let scenario = Scenario {
            fleet_size: self.fleet_size,
            window_ms: self.window_ms,
            quantum_ms: self.quantum_ms,
            epoch_windows: self.epoch_windows,
            windows: self.windows,
            seed: self.seed,
            cold_start_windows: self.cold_start_windows,
            gpu_memory_mb: self.gpu_memory_mb,
            sharing: self.sharing,
            restructure_threshold: self.restructure_threshold,
            predictor_windows: self.predictor_windows,
            policy: self.policy,
            functions,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

fn read_replay(path: &Path) -> Result<Vec<u64>, SimError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let n = line.parse::<u64>().map_err(|e| {
            SimError::InvalidScenario(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_counts_are_exact() {
        let t = WorkloadTrace::constant(10.0);
        assert_eq!(t.window_counts(3, 1000, 0), vec![10, 10, 10]);
        let frac = WorkloadTrace::constant(2.5);
        let c = frac.window_counts(4, 1000, 0);
        assert_eq!(c.iter().sum::<u64>(), 10);
    }

    #[test]
    fn step_and_counts() {
        let t = WorkloadTrace::step(5.0, 10.0, 2);
        assert_eq!(t.window_counts(4, 1000, 0), vec![5, 5, 10, 10]);
        let c = WorkloadTrace::counts(vec![1, 2]);
        assert_eq!(c.window_counts(3, 1000, 0), vec![1, 2, 0]);
    }

    #[test]
    fn poisson_is_seeded() {
        let t = WorkloadTrace {
            pattern: TracePattern::Constant { rps: 50.0 },
            poisson: true,
        };
        assert_eq!(t.window_counts(20, 1000, 7), t.window_counts(20, 1000, 7));
        assert_ne!(t.window_counts(20, 1000, 7), t.window_counts(20, 1000, 8));
    }

    #[test]
    fn validation() {
        let s = Scenario {
            fleet_size: 0,
            ..Scenario::default()
        };
        assert!(matches!(s.validate(), Err(SimError::InvalidScenario(_))));
        let s = Scenario {
            epoch_windows: 0,
            ..Scenario::default()
        };
        assert!(s.validate().is_err());
        assert!(Scenario::default().validate().is_ok());
    }

    #[test]
    fn scenario_file_parses() {
        let json = r#"{
            "windows": 10,
            "functions": [{
                "function_id": "resnet",
                "profile": {"synthetic": {"t_max": 200, "sm_knee": 24, "slo_ms": 69}},
                "trace": {"kind": "constant", "rps": 20}
            }]
        }"#;
        let file: ScenarioFile = serde_json::from_str(json).unwrap();
        let s = file.resolve(Path::new(".")).unwrap();
        assert_eq!(s.functions[0].profile.len(), 35);
        assert_eq!(s.functions[0].profile.slo_latency_ms(), 69.0);
        assert_eq!(s.epoch_windows, 5);
        assert_eq!(s.cold_start_windows, 2);
    }
}
