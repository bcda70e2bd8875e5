// SPDX-License-Identifier: Apache-2.0

//! GPU memory accounting with and without model sharing.
//!
//! Without sharing every pod carries its own copy of the model. With sharing,
//! each `(model, GPU)` pair pays once for a storage server holding the
//! parameters plus a fixed context overhead, and each pod only pays for its
//! runtime (activations, framework state).

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::FunctionId;

/// Context overhead of the per-GPU model storage process, in MB.
pub const CONTEXT_OVERHEAD_MB: u64 = 300;

/// Device memory of a 16 GB V100.
pub const DEFAULT_CAPACITY_MB: u64 = 16384;

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("memory spec fields must be positive (noshare={0}, runtime={1}, server={2})")]
    NonPositive(u64, u64, u64),
    #[error("no memory spec for function {0}")]
    UnknownModel(FunctionId),
    #[error("function {0} has no resident pods on this GPU")]
    NotResident(FunctionId),
    #[error("memory table line {line}: {message}")]
    Parse { line: u64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySpec {
    pub mem_noshare_mb: u64,
    pub mem_runtime_mb: u64,
    /// Parameters plus [`CONTEXT_OVERHEAD_MB`], paid once per GPU when shared.
    pub mem_server_mb: u64,
}

impl MemorySpec {
    pub fn new(noshare: u64, runtime: u64, server: u64) -> Result<Self, MemoryError> {
        if noshare == 0 || runtime == 0 || server == 0 {
            return Err(MemoryError::NonPositive(noshare, runtime, server));
        }
        Ok(Self {
            mem_noshare_mb: noshare,
            mem_runtime_mb: runtime,
            mem_server_mb: server,
        })
    }

    /// Builds a spec from the size of the shared parameters; the server cost
    /// is `params_mb + CONTEXT_OVERHEAD_MB`.
    pub fn from_parameters(noshare: u64, runtime: u64, params_mb: u64) -> Result<Self, MemoryError> {
        Self::new(noshare, runtime, params_mb + CONTEXT_OVERHEAD_MB)
    }

    /// Footprint of `pods` replicas of this model on one GPU.
    pub fn footprint(&self, pods: u32, mode: SharingMode) -> u64 {
        if pods == 0 {
            return 0;
        }
        let n = u64::from(pods);
        match mode {
            SharingMode::Shared => self.mem_server_mb + n * self.mem_runtime_mb,
            SharingMode::Exclusive => n * self.mem_noshare_mb,
        }
    }
}

impl Default for MemorySpec {
    fn default() -> Self {
        Self {
            mem_noshare_mb: 1024,
            mem_runtime_mb: 768,
            mem_server_mb: 256 + CONTEXT_OVERHEAD_MB,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    #[default]
    Shared,
    Exclusive,
}

/// Memory specs of every known model plus the sharing mode in force.
#[derive(Debug, Clone, Default)]
pub struct MemoryBook {
    specs: BTreeMap<FunctionId, MemorySpec>,
    mode: SharingMode,
}

impl MemoryBook {
    pub fn new(mode: SharingMode) -> Self {
        Self {
            specs: BTreeMap::new(),
            mode,
        }
    }

    pub fn with_spec(mut self, function_id: FunctionId, spec: MemorySpec) -> Self {
        self.insert(function_id, spec);
        self
    }

    pub fn insert(&mut self, function_id: FunctionId, spec: MemorySpec) {
        self.specs.insert(function_id, spec);
    }

    pub fn mode(&self) -> SharingMode {
        self.mode
    }

    pub fn spec(&self, function_id: &FunctionId) -> Result<MemorySpec, MemoryError> {
        self.specs
            .get(function_id)
            .copied()
            .ok_or_else(|| MemoryError::UnknownModel(function_id.clone()))
    }
}

/// Memory residency of one GPU: pods per model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GpuMemoryState {
    pub capacity_mb: u64,
    resident: BTreeMap<FunctionId, u32>,
}

impl Default for GpuMemoryState {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY_MB)
    }
}

impl GpuMemoryState {
    pub fn new(capacity_mb: u64) -> Self {
        Self {
            capacity_mb,
            resident: BTreeMap::new(),
        }
    }

    pub fn pods_of(&self, function_id: &FunctionId) -> u32 {
        self.resident.get(function_id).copied().unwrap_or(0)
    }

    pub fn resident(&self) -> impl Iterator<Item = (&FunctionId, u32)> {
        self.resident.iter().map(|(k, v)| (k, *v))
    }

    pub fn add_pod(&mut self, function_id: &FunctionId) {
        *self.resident.entry(function_id.clone()).or_insert(0) += 1;
    }

    pub fn remove_pod(&mut self, function_id: &FunctionId) -> Result<(), MemoryError> {
        match self.resident.get_mut(function_id) {
            Some(n) if *n > 1 => {
                *n -= 1;
                Ok(())
            }
            Some(_) => {
                self.resident.remove(function_id);
                Ok(())
            }
            None => Err(MemoryError::NotResident(function_id.clone())),
        }
    }

    pub fn clear(&mut self) {
        self.resident.clear();
    }
}

/// Total footprint in MB. Sharing: `sum(server + count * runtime)`;
/// exclusive: `sum(count * noshare)`.
pub fn footprint(state: &GpuMemoryState, book: &MemoryBook) -> Result<u64, MemoryError> {
    state.resident.iter().try_fold(0u64, |acc, (fid, &count)| {
        Ok(acc + book.spec(fid)?.footprint(count, book.mode))
    })
}

/// Whether one more pod of `function_id` fits on the GPU.
/// Unknown models are never admitted.
pub fn admit(state: &GpuMemoryState, book: &MemoryBook, function_id: &FunctionId) -> bool {
    let Ok(spec) = book.spec(function_id) else {
        return false;
    };
    let Ok(total) = footprint(state, book) else {
        return false;
    };
    let n = state.pods_of(function_id);
    let delta = spec.footprint(n + 1, book.mode) - spec.footprint(n, book.mode);
    total + delta <= state.capacity_mb
}

#[derive(Deserialize)]
struct MemoryRecord {
    model: FunctionId,
    mem_noshare_mb: u64,
    mem_runtime_mb: u64,
    mem_server_mb: u64,
}

/// Reads a `model,mem_noshare_mb,mem_runtime_mb,mem_server_mb` CSV table.
pub fn read_memory_specs<R: Read>(reader: R) -> Result<Vec<(FunctionId, MemorySpec)>, MemoryError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<MemoryRecord>() {
        let rec = rec.map_err(|e| MemoryError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let spec = MemorySpec::new(rec.mem_noshare_mb, rec.mem_runtime_mb, rec.mem_server_mb)?;
        out.push((rec.model, spec));
    }
    Ok(out)
}

/// Largest pod count of a single model an empty GPU of `capacity_mb` can hold.
pub fn max_admissible(capacity_mb: u64, spec: MemorySpec, mode: SharingMode) -> u32 {
    let fid = FunctionId::new("probe");
    let book = MemoryBook::new(mode).with_spec(fid.clone(), spec);
    let mut state = GpuMemoryState::new(capacity_mb);
    let mut n = 0;
    while admit(&state, &book, &fid) {
        state.add_pod(&fid);
        n += 1;
    }
    n
}
