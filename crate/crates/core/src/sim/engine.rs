// SPDX-License-Identifier: Apache-2.0

//! Millisecond-tick simulation loop.
//!
//! Every `epoch_windows` windows the autoscaler re-plans each function and the
//! packer places new pods. Within a window, each GPU's backend hands out
//! tokens once per tick and pods with a live token drain their function's
//! FIFO queue at the profiled full-window rate.

use std::collections::{BTreeMap, VecDeque};

use super::metrics::{latency_of, summarize, CompletedRequest, FunctionWindow, GpuWindow, MetricsReport, WindowMetrics};
use super::scenario::{FunctionSpec, Policy, Scenario};
use super::{GpuBackendDump, RunOptions, RunOutput, SimError};
use crate::autoscaler::{plan, DemandEstimate, DemandPredictor, MaxRecent, RunningSet, ScalingAction};
use crate::ids::PodId;
use crate::memory_model::{footprint, MemoryBook};
use crate::packer::{verify, Cluster, PodRequest, RestructureOrder};
use crate::profiles::ConfigPoint;
use crate::resource::ResourceConfig;
use crate::token_backend::{BackendTable, QUOTA_EPSILON, SM_GLOBAL_LIMIT};

const EPS: f64 = 1e-9;

struct InService {
    arrival_ms: f64,
    start_ms: f64,
    remaining_ms: f64,
}

struct LiveToken {
    id: u64,
    duration: f64,
    remaining_ms: f64,
    elapsed_ms: f64,
}

struct PodState {
    fn_idx: usize,
    config: ResourceConfig,
    request: PodRequest,
    gpu: Option<usize>,
    ready_at_ms: f64,
    service_ms: f64,
    in_service: Option<InService>,
    token: Option<LiveToken>,
}

#[derive(Default)]
struct Counters {
    arrivals: u64,
    completions: u64,
    violations: u64,
    dropped: u64,
}

struct FunctionState {
    spec: FunctionSpec,
    counts: Vec<u64>,
    queue: VecDeque<f64>,
    running: RunningSet,
    history_rps: Vec<f64>,
    next_pod: u64,
    win: Counters,
}

#[derive(Default, Clone, Copy)]
struct GpuAcc {
    covered_ms: f64,
    sm_ms: f64,
}

pub(crate) struct Engine<'a> {
    sc: &'a Scenario,
    window_ms: f64,
    fns: Vec<FunctionState>,
    pods: BTreeMap<PodId, PodState>,
    pending: Vec<PodId>,
    cluster: Cluster,
    book: MemoryBook,
    backends: BTreeMap<usize, BackendTable>,
    predictor: MaxRecent,
    failures: u64,
    dumps: Option<Vec<GpuBackendDump>>,
}

impl<'a> Engine<'a> {
    pub(crate) fn new(sc: &'a Scenario, opts: &RunOptions) -> Result<Self, SimError> {
        sc.validate()?;
        let mut book = MemoryBook::new(sc.sharing);
        let fns = sc
            .functions
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                book.insert(spec.function_id().clone(), spec.profile.memory());
                let seed = sc.seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                FunctionState {
                    counts: spec.trace.window_counts(sc.windows, sc.window_ms, seed),
                    queue: VecDeque::new(),
                    running: RunningSet::new(spec.function_id().clone()),
                    history_rps: Vec::new(),
                    next_pod: 0,
                    win: Counters::default(),
                    spec: spec.clone(),
                }
            })
            .collect();
        Ok(Self {
            sc,
            window_ms: f64::from(sc.window_ms),
            fns,
            pods: BTreeMap::new(),
            pending: Vec::new(),
            cluster: Cluster::new(sc.fleet_size, sc.gpu_memory_mb),
            book,
            backends: BTreeMap::new(),
            predictor: MaxRecent {
                windows: sc.predictor_windows,
            },
            failures: 0,
            dumps: opts.dump_backend.then(Vec::new),
        })
    }

    pub(crate) fn run(mut self) -> Result<RunOutput, SimError> {
        let mut windows = Vec::with_capacity(self.sc.windows as usize);
        for w in 0..self.sc.windows {
            if w % self.sc.epoch_windows == 0 {
                self.epoch(w)?;
            }
            windows.push(self.window(w)?);
        }
        let backlog = self
            .fns
            .iter()
            .enumerate()
            .map(|(i, f)| (f.spec.function_id().clone(), self.backlog(i)))
            .collect::<Vec<_>>();
        let summary = summarize(&windows, self.sc.policy.as_str(), self.sc.window_ms, self.sc.seed, &backlog);
        Ok(RunOutput {
            report: MetricsReport { summary, windows },
            backend_dumps: self.dumps.unwrap_or_default(),
        })
    }

    fn backlog(&self, fn_idx: usize) -> u64 {
        let in_service = self
            .pods
            .values()
            .filter(|p| p.fn_idx == fn_idx && p.in_service.is_some())
            .count();
        (self.fns[fn_idx].queue.len() + in_service) as u64
    }

    /// Scaling step: predict, plan, release, restructure, place.
    fn epoch(&mut self, w: u32) -> Result<(), SimError> {
        let window_s = self.window_ms / 1000.0;
        let mut removes = Vec::new();
        let mut adds: Vec<(usize, ConfigPoint)> = Vec::new();
        for (i, f) in self.fns.iter().enumerate() {
            let seeded;
            let history = if !f.history_rps.is_empty() {
                &f.history_rps
            } else if f.spec.prewarm && w == 0 {
                seeded = [f.counts.first().copied().unwrap_or(0) as f64 / window_s];
                &seeded[..]
            } else {
                continue;
            };
            let demand = DemandEstimate::new(f.spec.function_id().clone(), self.predictor.predict(history)?)?;
            for d in plan(&f.spec.profile, &f.running, &demand)? {
                match d.action {
                    ScalingAction::Add => adds.push((i, d.point)),
                    ScalingAction::Remove(pod_id) => removes.push(pod_id),
                }
            }
        }
        for pod_id in removes {
            self.remove_pod(&pod_id)?;
        }
        let failed = self
            .cluster
            .restructure_all(self.sc.restructure_threshold, RestructureOrder::DescendingArea);
        if !failed.is_empty() {
            log::warn!("window {w}: restructure kept old layout on GPUs {failed:?}");
        }
        for (i, point) in adds {
            self.add_pod(i, point)?;
        }
        self.place_pending(w)?;
        for node in self.cluster.open_nodes() {
            let problems = verify::check_node(node);
            if !problems.is_empty() {
                return Err(SimError::Invariant(format!(
                    "window {w}, GPU {}: {}",
                    node.gpu_id,
                    problems.join("; ")
                )));
            }
        }
        Ok(())
    }

    fn add_pod(&mut self, fn_idx: usize, point: ConfigPoint) -> Result<(), SimError> {
        let f = &mut self.fns[fn_idx];
        let fid = f.spec.function_id().clone();
        let pod_id = PodId::new(format!("{fid}-{:04}", f.next_pod));
        f.next_pod += 1;
        let rate = f.spec.profile.running_rate(point)?;
        if !(rate.is_finite() && rate > 0.0) {
            return Err(SimError::InvalidScenario(format!(
                "{fid}: no service rate at ({}, {})",
                point.sm_partition(),
                point.quota()
            )));
        }
        let mem = f.spec.profile.memory().mem_noshare_mb;
        let mut config = ResourceConfig::from_point(point, f.spec.elastic_quota, mem)?;
        if self.sc.policy == Policy::Timeshare {
            config = config.full_sm();
        }
        let request = PodRequest::from_config(pod_id.clone(), fid, &config)?;
        f.running.push(pod_id.clone(), point, &f.spec.profile)?;
        self.pods.insert(
            pod_id.clone(),
            PodState {
                fn_idx,
                config,
                request,
                gpu: None,
                ready_at_ms: 0.0,
                service_ms: 1000.0 / rate,
                in_service: None,
                token: None,
            },
        );
        self.pending.push(pod_id);
        Ok(())
    }

    /// Places every unplaced pod, largest area first. Pods that do not fit
    /// stay pending and are retried next epoch.
    fn place_pending(&mut self, w: u32) -> Result<(), SimError> {
        let mut order = std::mem::take(&mut self.pending);
        order.sort_by(|a, b| {
            let (ra, rb) = (&self.pods[a].request, &self.pods[b].request);
            rb.area().cmp(&ra.area()).then_with(|| a.cmp(b))
        });
        let start_ms = f64::from(w) * self.window_ms;
        for pod_id in order {
            let pod = self.pods.get_mut(&pod_id).expect("pending pod exists");
            match self.cluster.schedule(&pod.request, &self.book)? {
                Some(gpu) => {
                    let prewarm = w == 0 && self.fns[pod.fn_idx].spec.prewarm;
                    let delay = if prewarm { 0 } else { self.sc.cold_start_windows };
                    pod.gpu = Some(gpu);
                    pod.ready_at_ms = start_ms + f64::from(delay) * self.window_ms;
                    let quantum = f64::from(self.sc.quantum_ms) / self.window_ms;
                    let window_ms = self.window_ms;
                    let backend = match self.backends.entry(gpu) {
                        std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                        std::collections::btree_map::Entry::Vacant(e) => {
                            e.insert(BackendTable::new(window_ms, quantum)?)
                        }
                    };
                    backend.register_pod(pod_id, &pod.config)?;
                }
                None => {
                    log::debug!("window {w}: no room for {pod_id}");
                    self.failures += 1;
                    self.pending.push(pod_id);
                }
            }
        }
        Ok(())
    }

    fn remove_pod(&mut self, pod_id: &PodId) -> Result<(), SimError> {
        let Some(pod) = self.pods.remove(pod_id) else {
            return Err(SimError::Invariant(format!("scale-down named unknown pod {pod_id}")));
        };
        match pod.gpu {
            Some(gpu) => {
                let backend = self
                    .backends
                    .get_mut(&gpu)
                    .ok_or_else(|| SimError::Invariant(format!("GPU {gpu} has no backend")))?;
                if let Some(tok) = &pod.token {
                    backend.complete_token(tok.id, (tok.elapsed_ms / self.window_ms).min(tok.duration))?;
                }
                backend.deregister_pod(pod_id)?;
                self.cluster.unschedule(pod_id)?;
                if self.cluster.node(gpu).is_none() {
                    self.backends.remove(&gpu);
                }
            }
            None => self.pending.retain(|p| p != pod_id),
        }
        let f = &mut self.fns[pod.fn_idx];
        if let Some(req) = pod.in_service {
            f.queue.push_front(req.arrival_ms);
        }
        f.running.remove(pod_id);
        Ok(())
    }

    fn window(&mut self, w: u32) -> Result<WindowMetrics, SimError> {
        let w_ms = self.sc.window_ms;
        let start_ms = f64::from(w) * self.window_ms;
        for b in self.backends.values_mut() {
            b.reset_window();
        }
        let mut acc: BTreeMap<usize, GpuAcc> = self.backends.keys().map(|&g| (g, GpuAcc::default())).collect();
        let arrivals: Vec<u64> = self.fns.iter().map(|f| f.counts[w as usize]).collect();
        let mut next_arrival = vec![0u64; self.fns.len()];

        for t in 0..w_ms {
            let now = start_ms + f64::from(t);
            for (i, f) in self.fns.iter_mut().enumerate() {
                let n = arrivals[i];
                while next_arrival[i] < n && next_arrival[i] * u64::from(w_ms) / n == u64::from(t) {
                    next_arrival[i] += 1;
                    f.win.arrivals += 1;
                    if f.spec.max_queue.is_some_and(|cap| f.queue.len() >= cap) {
                        f.win.dropped += 1;
                    } else {
                        f.queue.push_back(now);
                    }
                }
            }
            self.dispatch(now, f64::from(t) / self.window_ms)?;
            self.serve(now, &mut acc)?;
        }

        let mut functions = Vec::with_capacity(self.fns.len());
        for i in 0..self.fns.len() {
            let depth = self.backlog(i);
            let f = &mut self.fns[i];
            let c = std::mem::take(&mut f.win);
            f.history_rps.push(c.arrivals as f64 / (self.window_ms / 1000.0));
            functions.push(FunctionWindow {
                function_id: f.spec.function_id().clone(),
                arrivals: c.arrivals,
                completions: c.completions,
                slo_violations: c.violations,
                dropped: c.dropped,
                queue_depth: depth,
                pods: f.running.len() as u64,
            });
        }
        let gpus = self
            .cluster
            .open_nodes()
            .iter()
            .map(|node| {
                let a = acc.get(&node.gpu_id).copied().unwrap_or_default();
                Ok(GpuWindow {
                    gpu_id: node.gpu_id,
                    utilization: a.covered_ms / self.window_ms,
                    sm_occupancy: a.sm_ms / (SM_GLOBAL_LIMIT * self.window_ms),
                    memory_mb: footprint(&node.mem, &self.book)?,
                    pods: node.placements.len() as u64,
                })
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        if let Some(dumps) = &mut self.dumps {
            for (&gpu_id, b) in &self.backends {
                dumps.push(GpuBackendDump {
                    gpu_id,
                    snapshot: b.snapshot(u64::from(w)),
                });
            }
        }
        let metrics = WindowMetrics {
            window: w,
            functions,
            gpus,
            gpus_in_use: self.cluster.gpus_in_use() as u64,
            placement_failures: std::mem::take(&mut self.failures),
            fragmentation: self.cluster.fragmentation(),
        };
        Ok(metrics)
    }

    /// One scheduling round per GPU for pods that are warm, idle and have work.
    fn dispatch(&mut self, now: f64, issued_at: f64) -> Result<(), SimError> {
        for (&gpu, backend) in &mut self.backends {
            let requesting: Vec<PodId> = backend
                .pods()
                .filter(|p| p.live_token.is_none())
                .filter(|p| {
                    self.pods.get(&p.pod_id).is_some_and(|pod| {
                        now + EPS >= pod.ready_at_ms
                            && (pod.in_service.is_some() || !self.fns[pod.fn_idx].queue.is_empty())
                    })
                })
                .map(|p| p.pod_id.clone())
                .collect();
            if requesting.is_empty() {
                continue;
            }
            for token in backend.schedule_round(&requesting, issued_at) {
                let pod = self
                    .pods
                    .get_mut(&token.pod_id)
                    .ok_or_else(|| SimError::Invariant(format!("token for unknown pod {}", token.pod_id)))?;
                pod.token = Some(LiveToken {
                    id: token.id,
                    duration: token.duration,
                    remaining_ms: token.duration * self.window_ms,
                    elapsed_ms: 0.0,
                });
            }
            if backend.s_running() > SM_GLOBAL_LIMIT + QUOTA_EPSILON {
                return Err(SimError::Invariant(format!(
                    "GPU {gpu}: {} SMs running",
                    backend.s_running()
                )));
            }
        }
        Ok(())
    }

    /// Runs every live token for up to one millisecond.
    fn serve(&mut self, now: f64, acc: &mut BTreeMap<usize, GpuAcc>) -> Result<(), SimError> {
        for (&gpu, backend) in &mut self.backends {
            let live: Vec<(u64, PodId)> = backend.live_tokens().map(|t| (t.id, t.pod_id.clone())).collect();
            let mut covered: f64 = 0.0;
            let mut sm = 0.0;
            for (token_id, pod_id) in live {
                let pod = self
                    .pods
                    .get_mut(&pod_id)
                    .ok_or_else(|| SimError::Invariant(format!("live token for unknown pod {pod_id}")))?;
                let f = &mut self.fns[pod.fn_idx];
                let slo = f.spec.profile.slo_latency_ms();
                let tok = pod.token.as_mut().expect("live token mirrored on pod");
                let avail = tok.remaining_ms.min(1.0);
                let used = serve_pod(&mut pod.in_service, pod.service_ms, f, now, avail, slo);
                let tok = pod.token.as_mut().expect("live token mirrored on pod");
                tok.remaining_ms -= used;
                tok.elapsed_ms += used;
                covered = covered.max(used);
                sm += pod.config.sm_partition * used;
                let idle = used < avail - EPS;
                if idle || tok.remaining_ms <= EPS {
                    let elapsed = (tok.elapsed_ms / self.window_ms).min(tok.duration);
                    backend.complete_token(token_id, elapsed)?;
                    pod.token = None;
                }
            }
            let a = acc.entry(gpu).or_default();
            a.covered_ms += covered;
            a.sm_ms += sm;
        }
        Ok(())
    }
}

/// Serves `f`'s queue for `avail` ms starting at `now`; returns the time used.
fn serve_pod(
    in_service: &mut Option<InService>,
    service_ms: f64,
    f: &mut FunctionState,
    now: f64,
    avail: f64,
    slo_ms: f64,
) -> f64 {
    let mut cursor = 0.0;
    while avail - cursor > EPS {
        if in_service.is_none() {
            let Some(arrival_ms) = f.queue.pop_front() else {
                break;
            };
            *in_service = Some(InService {
                arrival_ms,
                start_ms: now + cursor,
                remaining_ms: service_ms,
            });
        }
        let req = in_service.as_mut().expect("just filled");
        let work = req.remaining_ms.min(avail - cursor);
        cursor += work;
        req.remaining_ms -= work;
        if req.remaining_ms <= EPS {
            let done = CompletedRequest {
                arrival_ms: req.arrival_ms,
                start_ms: req.start_ms,
                finish_ms: now + cursor,
            };
            f.win.completions += 1;
            if latency_of(&done) > slo_ms + EPS {
                f.win.violations += 1;
            }
            *in_service = None;
        }
    }
    cursor
}
