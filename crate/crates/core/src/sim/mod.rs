// SPDX-License-Identifier: Apache-2.0

//! Discrete-time cluster simulator tying the autoscaler, packer, memory model
//! and token backend together.

mod engine;
pub mod metrics;
pub mod scenario;

use serde::Serialize;
use thiserror::Error;

pub use metrics::{latency_of, CompletedRequest, MetricsReport, Summary, WindowMetrics};
pub use scenario::{FunctionSpec, Policy, Scenario, ScenarioFile, TracePattern, WorkloadTrace};

use crate::autoscaler::AutoscaleError;
use crate::memory_model::MemoryError;
use crate::packer::PackError;
use crate::profiles::ProfileError;
use crate::resource::ResourceError;
use crate::token_backend::{BackendError, BackendSnapshot};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Autoscale(#[from] AutoscaleError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SimError {
    /// True for failures of an internal safety check rather than bad input.
    pub fn is_invariant(&self) -> bool {
        matches!(self, SimError::Invariant(_) | SimError::Backend(BackendError::Overrun { .. }))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Record every GPU's backend table at the end of each window.
    pub dump_backend: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpuBackendDump {
    pub gpu_id: usize,
    pub snapshot: BackendSnapshot,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub backend_dumps: Vec<GpuBackendDump>,
}

pub fn run(scenario: &Scenario) -> Result<MetricsReport, SimError> {
    run_with(scenario, RunOptions::default()).map(|o| o.report)
}

pub fn run_with(scenario: &Scenario, opts: RunOptions) -> Result<RunOutput, SimError> {
    engine::Engine::new(scenario, &opts)?.run()
}

/// The same scenario under both placement policies.
#[derive(Debug, Clone)]
pub struct PolicyComparison {
    pub fast: MetricsReport,
    pub timeshare: MetricsReport,
}

pub fn compare_policies(scenario: &Scenario) -> Result<PolicyComparison, SimError> {
    let fast = scenario.with_policy(Policy::Fast);
    let timeshare = scenario.with_policy(Policy::Timeshare);
    #[cfg(feature = "parallel")]
    let (a, b) = rayon::join(|| run(&fast), || run(&timeshare));
    #[cfg(not(feature = "parallel"))]
    let (a, b) = (run(&fast), run(&timeshare));
    Ok(PolicyComparison {
        fast: a?,
        timeshare: b?,
    })
}

pub fn run_many_seq(scenarios: &[Scenario]) -> Vec<Result<MetricsReport, SimError>> {
    scenarios.iter().map(run).collect()
}

#[cfg(feature = "parallel")]
pub fn run_many_par(scenarios: &[Scenario]) -> Vec<Result<MetricsReport, SimError>> {
    use rayon::prelude::*;
    scenarios.par_iter().map(run).collect()
}

/// Runs independent scenarios, in parallel when the feature is enabled.
pub fn run_many(scenarios: &[Scenario]) -> Vec<Result<MetricsReport, SimError>> {
    #[cfg(feature = "parallel")]
    {
        run_many_par(scenarios)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_many_seq(scenarios)
    }
}
