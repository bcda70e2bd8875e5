// SPDX-License-Identifier: Apache-2.0

//! Heuristic autoscaling from profiled throughput.
//!
//! The gap between predicted demand and the summed throughput of a function's
//! running pods drives scaling. On scale-up most of the gap is covered by
//! copies of the configuration with the highest RPS per unit of resource
//! (RPR), and any residual by the smallest configuration that still covers it.
//! On scale-down the least efficient pods go first, and only while the
//! remaining capacity still meets demand.

use serde::Serialize;
use thiserror::Error;

use crate::ids::{FunctionId, PodId};
use crate::profiles::{rpr_of, ConfigPoint, FunctionProfile, ProfileError};

/// Relative tolerance for deciding that a gap divides exactly.
const GAP_EPSILON: f64 = 1e-9;

pub const DEFAULT_PREDICTOR_WINDOWS: usize = 3;

#[derive(Debug, Error)]
pub enum AutoscaleError {
    #[error("function {0} has an empty profile")]
    EmptyProfile(FunctionId),
    #[error("function {0} has no configuration with positive throughput")]
    NoThroughput(FunctionId),
    #[error("demand history is empty")]
    EmptyHistory,
    #[error("invalid demand value {0}")]
    InvalidDemand(f64),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemandEstimate {
    pub function_id: FunctionId,
    pub predicted_rps: f64,
}

impl DemandEstimate {
    pub fn new(function_id: FunctionId, predicted_rps: f64) -> Result<Self, AutoscaleError> {
        if !(predicted_rps.is_finite() && predicted_rps >= 0.0) {
            return Err(AutoscaleError::InvalidDemand(predicted_rps));
        }
        Ok(Self {
            function_id,
            predicted_rps,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunningPod {
    pub pod_id: PodId,
    pub point: ConfigPoint,
    pub throughput_rps: f64,
    pub rpr: f64,
}

/// A function's pods, kept in ascending RPR order (pod id breaks ties), so
/// the front is always the least efficient pod.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunningSet {
    pub function_id: FunctionId,
    pods: Vec<RunningPod>,
}

impl RunningSet {
    pub fn new(function_id: FunctionId) -> Self {
        Self {
            function_id,
            pods: Vec::new(),
        }
    }

    pub fn push(&mut self, pod_id: PodId, point: ConfigPoint, profile: &FunctionProfile) -> Result<(), ProfileError> {
        let throughput_rps = profile.throughput_at(point)?;
        let pod = RunningPod {
            pod_id,
            point,
            throughput_rps,
            rpr: rpr_of(throughput_rps, point),
        };
        let at = self
            .pods
            .partition_point(|p| p.rpr.total_cmp(&pod.rpr).then_with(|| p.pod_id.cmp(&pod.pod_id)).is_lt());
        self.pods.insert(at, pod);
        Ok(())
    }

    pub fn remove(&mut self, pod_id: &PodId) -> Option<RunningPod> {
        let idx = self.pods.iter().position(|p| &p.pod_id == pod_id)?;
        Some(self.pods.remove(idx))
    }

    pub fn front(&self) -> Option<&RunningPod> {
        self.pods.first()
    }

    pub fn pods(&self) -> &[RunningPod] {
        &self.pods
    }

    pub fn len(&self) -> usize {
        self.pods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pods.is_empty()
    }

    pub fn contains(&self, pod_id: &PodId) -> bool {
        self.pods.iter().any(|p| &p.pod_id == pod_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingAction {
    Add,
    Remove(PodId),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingDecision {
    pub function_id: FunctionId,
    pub action: ScalingAction,
    pub point: ConfigPoint,
}

/// `predicted demand - sum of running throughput`. Throughputs are re-read
/// from the profile so a stale configuration surfaces as an error.
pub fn rps_gap(
    profile: &FunctionProfile,
    running: &RunningSet,
    demand: &DemandEstimate,
) -> Result<f64, ProfileError> {
    let capacity = running
        .pods
        .iter()
        .try_fold(0.0, |acc, p| Ok::<_, ProfileError>(acc + profile.throughput_at(p.point)?))?;
    Ok(demand.predicted_rps - capacity)
}

/// Relative tolerance under which two RPR values count as a tie. Profiles
/// with quota-proportional throughput give equal RPR along the quota axis,
/// and the division would otherwise pick a winner from rounding noise.
pub const RPR_TIE_TOLERANCE: f64 = 1e-9;

/// The configuration with the highest RPR. Ties (within
/// [`RPR_TIE_TOLERANCE`]) go to the smaller `second_cores`, then to the lower
/// point.
pub fn most_efficient(profile: &FunctionProfile) -> Option<(ConfigPoint, f64)> {
    let mut best: Option<(ConfigPoint, f64, f64)> = None;
    for e in profile.entries() {
        let rpr = rpr_of(e.throughput_rps, e.point);
        let better = match best {
            None => true,
            Some((bp, _, brpr)) => {
                let tol = RPR_TIE_TOLERANCE * rpr.abs().max(brpr.abs());
                if (rpr - brpr).abs() <= tol {
                    e.point.second_cores() < bp.second_cores()
                } else {
                    rpr > brpr
                }
            }
        };
        if better {
            best = Some((e.point, e.throughput_rps, rpr));
        }
    }
    best.map(|(p, t, _)| (p, t))
}

/// The configuration whose throughput exceeds `residual` by the least.
/// Ties go to the smaller `second_cores`, then to the lower point.
pub fn smallest_sufficient(profile: &FunctionProfile, residual: f64) -> Option<(ConfigPoint, f64)> {
    profile
        .entries()
        .filter(|e| e.throughput_rps > residual)
        .map(|e| (e.point, e.throughput_rps))
        .min_by(|a, b| {
            (a.1 - residual)
                .total_cmp(&(b.1 - residual))
                .then(a.0.second_cores().total_cmp(&b.0.second_cores()))
                .then(a.0.cmp(&b.0))
        })
}

/// Add decisions covering a positive gap. A gap of zero or less yields none.
pub fn scale_up(profile: &FunctionProfile, gap: f64) -> Result<Vec<ScalingDecision>, AutoscaleError> {
    let fid = profile.function_id().clone();
    let (p_eff, t_eff) = most_efficient(profile).ok_or_else(|| AutoscaleError::EmptyProfile(fid.clone()))?;
    if gap.is_nan() || gap <= 0.0 {
        return Ok(Vec::new());
    }
    if t_eff <= 0.0 {
        return Err(AutoscaleError::NoThroughput(fid));
    }
    let tol = GAP_EPSILON * gap.max(1.0);
    let mut n = (gap / t_eff).floor();
    // Absorb division noise such as 0.3 / 0.1 = 2.999...
    if gap - (n + 1.0) * t_eff >= -tol {
        n += 1.0;
    }
    let mut residual = gap - n * t_eff;
    if residual <= tol {
        residual = 0.0;
    }
    let add = |point| ScalingDecision {
        function_id: fid.clone(),
        action: ScalingAction::Add,
        point,
    };
    let mut out: Vec<ScalingDecision> = (0..n as usize).map(|_| add(p_eff)).collect();
    if residual > 0.0 {
        let p_ideal = smallest_sufficient(profile, residual).map(|(p, _)| p).unwrap_or(p_eff);
        out.push(add(p_ideal));
    }
    Ok(out)
}

/// Remove decisions for a negative gap, least efficient pods first. Stops at
/// the first pod whose removal would leave capacity below demand.
pub fn scale_down(running: &RunningSet, gap: f64) -> Vec<ScalingDecision> {
    let mut out = Vec::new();
    if gap.is_nan() || gap >= 0.0 {
        return out;
    }
    let tol = GAP_EPSILON * gap.abs().max(1.0);
    let mut delta = gap;
    for pod in &running.pods {
        if delta >= -tol {
            break;
        }
        if delta + pod.throughput_rps > tol {
            break;
        }
        delta += pod.throughput_rps;
        out.push(ScalingDecision {
            function_id: running.function_id.clone(),
            action: ScalingAction::Remove(pod.pod_id.clone()),
            point: pod.point,
        });
    }
    out
}

/// Full scaling step for one function.
pub fn plan(
    profile: &FunctionProfile,
    running: &RunningSet,
    demand: &DemandEstimate,
) -> Result<Vec<ScalingDecision>, AutoscaleError> {
    let gap = rps_gap(profile, running, demand)?;
    if gap > 0.0 {
        scale_up(profile, gap)
    } else if gap < 0.0 {
        Ok(scale_down(running, gap))
    } else {
        Ok(Vec::new())
    }
}

/// Turns recent per-window request rates into a demand estimate.
pub trait DemandPredictor: Send + Sync {
    fn predict(&self, history: &[f64]) -> Result<f64, AutoscaleError>;
}

/// Maximum over the last `windows` observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxRecent {
    pub windows: usize,
}

impl Default for MaxRecent {
    fn default() -> Self {
        Self {
            windows: DEFAULT_PREDICTOR_WINDOWS,
        }
    }
}

impl DemandPredictor for MaxRecent {
    fn predict(&self, history: &[f64]) -> Result<f64, AutoscaleError> {
        if history.is_empty() {
            return Err(AutoscaleError::EmptyHistory);
        }
        let start = history.len().saturating_sub(self.windows.max(1));
        let max = history[start..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max.is_finite() && max >= 0.0) {
            return Err(AutoscaleError::InvalidDemand(max));
        }
        Ok(max)
    }
}

/// Demand estimate with the default predictor.
pub fn predict_demand(function_id: FunctionId, history_rps: &[f64]) -> Result<DemandEstimate, AutoscaleError> {
    let rps = MaxRecent::default().predict(history_rps)?;
    DemandEstimate::new(function_id, rps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory_model::MemorySpec;
    use crate::profiles::ProfileEntry;

    fn pt(s: f64, q: f64) -> ConfigPoint {
        ConfigPoint::new(s, q).unwrap()
    }

    fn profile(points: &[(f64, f64, f64)]) -> FunctionProfile {
        FunctionProfile::new(
            "f".into(),
            points.iter().map(|&(s, q, t)| ProfileEntry {
                point: pt(s, q),
                throughput_rps: t,
                p99_latency_ms: 10.0,
            }),
            100.0,
            MemorySpec::default(),
        )
        .unwrap()
    }

    fn adds(d: &[ScalingDecision]) -> Vec<ConfigPoint> {
        d.iter()
            .map(|d| {
                assert_eq!(d.action, ScalingAction::Add);
                d.point
            })
            .collect()
    }

    fn running(prof: &FunctionProfile, pods: &[(&str, f64, f64)]) -> RunningSet {
        let mut rs = RunningSet::new("f".into());
        for &(id, s, q) in pods {
            rs.push(id.into(), pt(s, q), prof).unwrap();
        }
        rs
    }

    #[test]
    fn gap_examples() {
        let prof = profile(&[(12.0, 0.4, 10.0)]);
        let rs = running(&prof, &[("a", 12.0, 0.4), ("b", 12.0, 0.4)]);
        let d = |r| DemandEstimate::new("f".into(), r).unwrap();
        assert_eq!(rps_gap(&prof, &rs, &d(25.0)).unwrap(), 5.0);
        assert_eq!(rps_gap(&prof, &rs, &d(5.0)).unwrap(), -15.0);
        assert_eq!(rps_gap(&prof, &RunningSet::new("f".into()), &d(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn gap_propagates_missing_configuration() {
        let prof = profile(&[(12.0, 0.4, 10.0)]);
        let other = profile(&[(24.0, 0.4, 15.0)]);
        let rs = running(&other, &[("a", 24.0, 0.4)]);
        let d = DemandEstimate::new("f".into(), 1.0).unwrap();
        assert!(rps_gap(&prof, &rs, &d).is_err());
    }

    #[test]
    fn scale_up_example() {
        let prof = profile(&[(12.0, 0.4, 10.0), (24.0, 0.4, 15.0)]);
        assert_eq!(adds(&scale_up(&prof, 25.0).unwrap()), vec![pt(12.0, 0.4); 3]);
        assert_eq!(adds(&scale_up(&prof, 20.0).unwrap()), vec![pt(12.0, 0.4); 2]);
        // residual 2: the 10 rps point is the tightest fit
        assert_eq!(adds(&scale_up(&prof, 22.0).unwrap()), vec![pt(12.0, 0.4); 3]);
        let prof = profile(&[(12.0, 0.4, 10.0), (24.0, 0.4, 15.0), (24.0, 0.6, 6.0)]);
        assert_eq!(
            adds(&scale_up(&prof, 22.0).unwrap()),
            vec![pt(12.0, 0.4), pt(12.0, 0.4), pt(24.0, 0.6)]
        );
    }

    #[test]
    fn scale_up_single_point() {
        let prof = profile(&[(12.0, 0.4, 10.0)]);
        assert_eq!(scale_up(&prof, 10.0).unwrap().len(), 1);
        assert!(scale_up(&prof, 0.0).unwrap().is_empty());
    }

    #[test]
    fn scale_up_division_noise() {
        let prof = profile(&[(12.0, 0.4, 0.1)]);
        assert_eq!(scale_up(&prof, 0.3).unwrap().len(), 3);
    }

    #[test]
    fn scale_up_residual_fallback() {
        // Efficient point T=10, the only larger point cannot cover r since
        // none exceeds it; falls back to p_eff.
        let prof = profile(&[(12.0, 0.2, 10.0), (100.0, 1.0, 4.0)]);
        let d = adds(&scale_up(&prof, 19.0).unwrap());
        assert_eq!(d, vec![pt(12.0, 0.2), pt(12.0, 0.2)]);
    }

    #[test]
    fn scale_up_empty_profile() {
        let prof = FunctionProfile::new("f".into(), [], 100.0, MemorySpec::default()).unwrap();
        assert!(matches!(scale_up(&prof, 5.0), Err(AutoscaleError::EmptyProfile(_))));
    }

    #[test]
    fn argmax_ties_prefer_smaller_footprint() {
        // rpr identical (proportional profile); smaller second_cores wins
        let prof = profile(&[(24.0, 0.4, 20.0), (12.0, 0.4, 10.0), (12.0, 0.2, 5.0)]);
        assert_eq!(most_efficient(&prof).unwrap().0, pt(12.0, 0.2));
        // 6 / 0.012 and 18 / 0.036 differ in the last bit
        let prof = profile(&[(6.0, 0.2, 6.0), (6.0, 0.6, 18.0), (6.0, 1.0, 30.0)]);
        assert_eq!(most_efficient(&prof).unwrap().0, pt(6.0, 0.2));
    }

    #[test]
    fn scale_down_examples() {
        // T=5 at rpr 100 and T=10 at rpr 200
        let prof = profile(&[(25.0, 0.2, 5.0), (50.0, 0.1, 10.0)]);
        let rs = running(&prof, &[("b", 50.0, 0.1), ("a", 25.0, 0.2)]);
        assert_eq!(rs.front().unwrap().pod_id.as_str(), "a");
        let d = scale_down(&rs, -12.0);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].action, ScalingAction::Remove("a".into()));
        assert_eq!(scale_down(&rs, -5.0).len(), 1);
        assert!(scale_down(&rs, -3.0).is_empty());
        assert!(scale_down(&rs, 0.0).is_empty());
        assert_eq!(scale_down(&rs, -15.0).len(), 2);
    }

    #[test]
    fn scale_down_empty_queue_terminates() {
        let rs = RunningSet::new("f".into());
        assert!(scale_down(&rs, -100.0).is_empty());
    }

    #[test]
    fn plan_at_equilibrium_is_empty() {
        let prof = profile(&[(12.0, 0.4, 10.0)]);
        let rs = running(&prof, &[("a", 12.0, 0.4)]);
        let d = DemandEstimate::new("f".into(), 10.0).unwrap();
        assert!(plan(&prof, &rs, &d).unwrap().is_empty());
    }

    #[test]
    fn predictor() {
        let f = FunctionId::new("f");
        assert_eq!(predict_demand(f.clone(), &[10.0, 20.0, 15.0]).unwrap().predicted_rps, 20.0);
        assert_eq!(predict_demand(f.clone(), &[7.0]).unwrap().predicted_rps, 7.0);
        assert_eq!(predict_demand(f.clone(), &[0.0, 0.0, 0.0]).unwrap().predicted_rps, 0.0);
        assert_eq!(predict_demand(f.clone(), &[99.0, 1.0, 2.0, 3.0]).unwrap().predicted_rps, 3.0);
        assert!(matches!(predict_demand(f, &[]), Err(AutoscaleError::EmptyHistory)));
    }
}
