// SPDX-License-Identifier: Apache-2.0

//! Per-GPU multi-token time-slice scheduler.
//!
//! Every window each pod may run for up to `q_limit` of the window and is
//! guaranteed `q_request` when the GPU can provide it. A scheduling round is
//! three steps:
//!
//! 1. [`BackendTable::filter`] blocks pods whose remaining quota
//!    `q_limit - q_used` is exhausted.
//! 2. [`BackendTable::enqueue`] orders the rest by quota deficit
//!    `q_request - q_used`, largest first, pod id breaking ties.
//! 3. [`BackendTable::dispatch`] grants tokens to the head of that queue
//!    while the summed SM partition of running pods stays within
//!    [`SM_GLOBAL_LIMIT`]. It stops at the first pod that does not fit.
//!
//! Token durations and quota usage are fractions of the window.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::ids::PodId;
use crate::resource::{ResourceConfig, ResourceError};

/// Upper bound on the summed SM partition of pods holding a live token.
pub const SM_GLOBAL_LIMIT: f64 = 100.0;

/// Quota remainders at or below this count as exhausted. Absorbs the rounding
/// of repeated fractional additions.
pub const QUOTA_EPSILON: f64 = 1e-9;

pub const DEFAULT_WINDOW_MS: f64 = 1000.0;
pub const DEFAULT_QUANTUM_MS: f64 = 20.0;

#[derive(Debug, Error, PartialEq)]
pub enum BackendError {
    #[error("pod {0} is already registered")]
    DuplicatePod(PodId),
    #[error("pod {0} is not registered")]
    UnknownPod(PodId),
    #[error("pod {0} still holds a live token")]
    PodBusy(PodId),
    #[error("token {0} is not live")]
    UnknownToken(u64),
    #[error("token {id} ran {elapsed} but was granted {duration}")]
    Overrun { id: u64, elapsed: f64, duration: f64 },
    #[error("invalid elapsed time {0}")]
    InvalidElapsed(f64),
    #[error("invalid backend parameters: window {window_ms} ms, quantum {quantum}")]
    InvalidParameters { window_ms: f64, quantum: f64 },
    #[error(transparent)]
    Resource(#[from] ResourceError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PodQuotaState {
    pub pod_id: PodId,
    pub q_request: f64,
    pub q_limit: f64,
    pub s_sms: f64,
    pub q_used: f64,
    pub live_token: Option<u64>,
}

impl PodQuotaState {
    /// `q_request - q_used`; negative once the pod runs elastically.
    pub fn q_miss(&self) -> f64 {
        self.q_request - self.q_used
    }

    /// `q_limit - q_used`.
    pub fn q_remain(&self) -> f64 {
        self.q_limit - self.q_used
    }

    pub fn is_blocked(&self) -> bool {
        self.q_remain() <= QUOTA_EPSILON
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Token {
    pub id: u64,
    pub pod_id: PodId,
    /// Granted run time, fraction of the window, in `(0, quantum]`.
    pub duration: f64,
    /// Window-relative issue time, fraction of the window.
    pub issued_at: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FilterOutcome {
    pub blocked: BTreeSet<PodId>,
    pub candidates: BTreeSet<PodId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackendTable {
    window_length_ms: f64,
    quantum: f64,
    pods: BTreeMap<PodId, PodQuotaState>,
    live: BTreeMap<u64, Token>,
    s_running: f64,
    next_token: u64,
}

impl Default for BackendTable {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW_MS, DEFAULT_QUANTUM_MS / DEFAULT_WINDOW_MS)
            .expect("defaults are valid")
    }
}

impl BackendTable {
    /// `quantum` is a fraction of the window in `(0, 1]`.
    pub fn new(window_length_ms: f64, quantum: f64) -> Result<Self, BackendError> {
        if !(window_length_ms > 0.0 && window_length_ms.is_finite() && quantum > 0.0 && quantum <= 1.0) {
            return Err(BackendError::InvalidParameters {
                window_ms: window_length_ms,
                quantum,
            });
        }
        Ok(Self {
            window_length_ms,
            quantum,
            pods: BTreeMap::new(),
            live: BTreeMap::new(),
            s_running: 0.0,
            next_token: 0,
        })
    }

    pub fn window_length_ms(&self) -> f64 {
        self.window_length_ms
    }

    pub fn quantum(&self) -> f64 {
        self.quantum
    }

    pub fn s_running(&self) -> f64 {
        self.s_running
    }

    pub fn pod(&self, pod_id: &PodId) -> Option<&PodQuotaState> {
        self.pods.get(pod_id)
    }

    pub fn pods(&self) -> impl Iterator<Item = &PodQuotaState> {
        self.pods.values()
    }

    pub fn live_tokens(&self) -> impl Iterator<Item = &Token> {
        self.live.values()
    }

    pub fn token(&self, id: u64) -> Option<&Token> {
        self.live.get(&id)
    }

    pub fn register_pod(&mut self, pod_id: PodId, config: &ResourceConfig) -> Result<(), BackendError> {
        config.validate()?;
        if self.pods.contains_key(&pod_id) {
            return Err(BackendError::DuplicatePod(pod_id));
        }
        self.pods.insert(
            pod_id.clone(),
            PodQuotaState {
                pod_id,
                q_request: config.quota_request,
                q_limit: config.quota_limit,
                s_sms: config.sm_partition,
                q_used: 0.0,
                live_token: None,
            },
        );
        Ok(())
    }

    /// Removes an idle pod. A pod holding a token must complete it first.
    pub fn deregister_pod(&mut self, pod_id: &PodId) -> Result<PodQuotaState, BackendError> {
        match self.pods.get(pod_id) {
            None => Err(BackendError::UnknownPod(pod_id.clone())),
            Some(p) if p.live_token.is_some() => Err(BackendError::PodBusy(pod_id.clone())),
            Some(_) => Ok(self.pods.remove(pod_id).expect("present")),
        }
    }

    /// Splits the table into blocked pods (`q_limit - q_used <= 0`) and
    /// candidates.
    pub fn filter(&self) -> FilterOutcome {
        let mut out = FilterOutcome::default();
        for p in self.pods.values() {
            if p.is_blocked() {
                out.blocked.insert(p.pod_id.clone());
            } else {
                out.candidates.insert(p.pod_id.clone());
            }
        }
        out
    }

    /// Orders candidates by `q_miss` descending, then pod id ascending.
    /// Ids not in the table are ignored.
    pub fn enqueue<'a>(&self, candidates: impl IntoIterator<Item = &'a PodId>) -> Vec<PodId> {
        let mut queue: Vec<&PodQuotaState> = candidates
            .into_iter()
            .filter_map(|id| self.pods.get(id))
            .collect();
        queue.sort_by(|a, b| b.q_miss().total_cmp(&a.q_miss()).then_with(|| a.pod_id.cmp(&b.pod_id)));
        queue.dedup_by(|a, b| a.pod_id == b.pod_id);
        queue.into_iter().map(|p| p.pod_id.clone()).collect()
    }

    /// Grants tokens to the head of `queue` until the next pod would push the
    /// running SM total past [`SM_GLOBAL_LIMIT`]. Pods that are unknown,
    /// blocked, or already running are passed over.
    pub fn dispatch(&mut self, queue: &[PodId], issued_at: f64) -> Vec<Token> {
        let mut granted = Vec::new();
        for pod_id in queue {
            let Some(pod) = self.pods.get(pod_id) else {
                continue;
            };
            if pod.live_token.is_some() || pod.is_blocked() {
                continue;
            }
            if pod.s_sms + self.s_running > SM_GLOBAL_LIMIT + QUOTA_EPSILON {
                break;
            }
            let duration = self.quantum.min(pod.q_remain());
            let token = Token {
                id: self.next_token,
                pod_id: pod_id.clone(),
                duration,
                issued_at,
            };
            self.next_token += 1;
            self.s_running += pod.s_sms;
            self.pods.get_mut(pod_id).expect("present").live_token = Some(token.id);
            self.live.insert(token.id, token.clone());
            granted.push(token);
        }
        granted
    }

    /// Retires a live token after it ran for `elapsed` (fraction of window).
    pub fn complete_token(&mut self, token_id: u64, elapsed: f64) -> Result<(), BackendError> {
        let token = self.live.get(&token_id).ok_or(BackendError::UnknownToken(token_id))?;
        if !(elapsed.is_finite() && elapsed >= 0.0) {
            return Err(BackendError::InvalidElapsed(elapsed));
        }
        if elapsed > token.duration + QUOTA_EPSILON {
            return Err(BackendError::Overrun {
                id: token_id,
                elapsed,
                duration: token.duration,
            });
        }
        let token = self.live.remove(&token_id).expect("present");
        let pod = self
            .pods
            .get_mut(&token.pod_id)
            .ok_or_else(|| BackendError::UnknownPod(token.pod_id.clone()))?;
        pod.q_used += elapsed;
        pod.live_token = None;
        self.s_running -= pod.s_sms;
        if self.live.is_empty() {
            self.s_running = 0.0;
        }
        Ok(())
    }

    /// Zeroes every pod's usage. Live tokens carry over into the new window.
    pub fn reset_window(&mut self) {
        for p in self.pods.values_mut() {
            p.q_used = 0.0;
        }
    }

    /// One full filter, enqueue, dispatch round restricted to `requesting`
    /// pods (those with work to do).
    pub fn schedule_round<'a>(
        &mut self,
        requesting: impl IntoIterator<Item = &'a PodId>,
        issued_at: f64,
    ) -> Vec<Token> {
        let filtered = self.filter();
        let wanted: Vec<&PodId> = requesting
            .into_iter()
            .filter(|id| filtered.candidates.contains(*id))
            .collect();
        let queue = self.enqueue(wanted);
        self.dispatch(&queue, issued_at)
    }

    pub fn snapshot(&self, window: u64) -> BackendSnapshot {
        BackendSnapshot {
            window,
            s_running: self.s_running,
            pods: self.pods.values().cloned().collect(),
            live_tokens: self.live.values().cloned().collect(),
        }
    }
}

/// Point-in-time dump of a table for debugging.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackendSnapshot {
    pub window: u64,
    pub s_running: f64,
    pub pods: Vec<PodQuotaState>,
    pub live_tokens: Vec<Token>,
}
