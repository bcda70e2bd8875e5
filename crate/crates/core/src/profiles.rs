// SPDX-License-Identifier: Apache-2.0

//! Per-function throughput/latency profiles over the `(sm_partition, quota)`
//! configuration grid.
//!
//! Profiles are either ingested from measurement files (CSV with a fixed
//! header, or one JSON object per line) or synthesised from a simple
//! saturating model. Lookups are exact: there is no interpolation between
//! profiled points, so the autoscaler can only choose configurations that
//! were actually measured.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::FunctionId;
use crate::memory_model::MemorySpec;

/// Header of the CSV profile format. Column order is part of the file format.
pub const CSV_HEADER: [&str; 9] = [
    "function_id",
    "sm_partition",
    "quota",
    "throughput_rps",
    "p99_ms",
    "slo_ms",
    "mem_noshare_mb",
    "mem_runtime_mb",
    "mem_server_mb",
];

/// Quota levels of the standard profiling grid (fraction of a window).
pub const STANDARD_QUOTAS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
/// SM partition levels of the standard profiling grid (percent).
pub const STANDARD_SM_PARTITIONS: [f64; 7] = [6.0, 12.0, 24.0, 50.0, 60.0, 80.0, 100.0];

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("duplicate configuration {point} for function {function_id}")]
    Conflict {
        function_id: FunctionId,
        point: ConfigPoint,
    },
    #[error("line {line}: function {function_id} has inconsistent {field} across records")]
    Inconsistent {
        line: u64,
        function_id: FunctionId,
        field: &'static str,
    },
    #[error("profile source contains no records")]
    Empty,
    #[error("expected a single function, found {0}")]
    MultipleFunctions(usize),
    #[error("invalid configuration point (sm_partition={sm_partition}, quota={quota})")]
    InvalidPoint { sm_partition: f64, quota: f64 },
    #[error("invalid profile value: {0}")]
    InvalidValue(String),
    #[error("function {function_id} has no profiled configuration {point}")]
    MissingConfiguration {
        function_id: FunctionId,
        point: ConfigPoint,
    },
    #[error("synthetic profile needs a non-empty grid")]
    EmptyGrid,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A spatio-temporal resource configuration: an SM partition in percent and a
/// time quota as a fraction of the scheduling window.
///
/// Points are totally ordered (SM first, then quota), which gives the
/// deterministic "lexicographic point order" used for tie-breaking.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct ConfigPoint {
    sm_partition: f64,
    quota: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    sm_partition: f64,
    quota: f64,
}

impl TryFrom<RawPoint> for ConfigPoint {
    type Error = ProfileError;
    fn try_from(raw: RawPoint) -> Result<Self, Self::Error> {
        ConfigPoint::new(raw.sm_partition, raw.quota)
    }
}

impl From<ConfigPoint> for RawPoint {
    fn from(p: ConfigPoint) -> Self {
        RawPoint {
            sm_partition: p.sm_partition,
            quota: p.quota,
        }
    }
}

impl ConfigPoint {
    pub fn new(sm_partition: f64, quota: f64) -> Result<Self, ProfileError> {
        let ok = sm_partition.is_finite()
            && quota.is_finite()
            && sm_partition > 0.0
            && sm_partition <= 100.0
            && quota > 0.0
            && quota <= 1.0;
        if !ok {
            return Err(ProfileError::InvalidPoint {
                sm_partition,
                quota,
            });
        }
        // +0.0 normalisation keeps Hash/Eq consistent.
        Ok(Self {
            sm_partition: sm_partition + 0.0,
            quota: quota + 0.0,
        })
    }

    /// SM partition in percent, `(0, 100]`.
    pub fn sm_partition(&self) -> f64 {
        self.sm_partition
    }

    /// Time quota as a fraction of the window, `(0, 1]`.
    pub fn quota(&self) -> f64 {
        self.quota
    }

    pub fn sm_fraction(&self) -> f64 {
        self.sm_partition / 100.0
    }

    /// Quota expressed in percent of the window.
    pub fn quota_percent(&self) -> f64 {
        self.quota * 100.0
    }

    /// `sm_fraction * quota`: the uniform 2D resource size of a pod.
    pub fn second_cores(&self) -> f64 {
        self.sm_fraction() * self.quota
    }

    /// Same SM partition, full quota.
    pub fn at_full_quota(&self) -> ConfigPoint {
        ConfigPoint {
            sm_partition: self.sm_partition,
            quota: 1.0,
        }
    }
}

impl PartialEq for ConfigPoint {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for ConfigPoint {}

impl PartialOrd for ConfigPoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ConfigPoint {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sm_partition
            .total_cmp(&other.sm_partition)
            .then(self.quota.total_cmp(&other.quota))
    }
}

impl Hash for ConfigPoint {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.sm_partition.to_bits().hash(state);
        self.quota.to_bits().hash(state);
    }
}

impl fmt::Display for ConfigPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}% SM, {} quota)", self.sm_partition, self.quota)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub point: ConfigPoint,
    pub throughput_rps: f64,
    pub p99_latency_ms: f64,
}

/// Which monotonicity check a measurement violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MonotonicityAxis {
    Quota,
    Sm,
}

/// A profile point whose throughput drops although more resources were given.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityWarning {
    pub function_id: FunctionId,
    pub axis: MonotonicityAxis,
    pub lower: ConfigPoint,
    pub higher: ConfigPoint,
    pub lower_rps: f64,
    pub higher_rps: f64,
}

impl fmt::Display for MonotonicityWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let axis = match self.axis {
            MonotonicityAxis::Quota => "quota",
            MonotonicityAxis::Sm => "sm",
        };
        write!(
            f,
            "{}: throughput drops along the {} axis: {} rps at {} > {} rps at {}",
            self.function_id, axis, self.lower_rps, self.lower, self.higher_rps, self.higher
        )
    }
}

/// Measured or synthetic throughput of one function over its profiled grid.
/// Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionProfile {
    function_id: FunctionId,
    entries: BTreeMap<ConfigPoint, ProfileEntry>,
    slo_latency_ms: f64,
    mem: MemorySpec,
}

pub const DEFAULT_SLO_MS: f64 = 100.0;

impl FunctionProfile {
    /// Builds a profile from entries, rejecting duplicate points.
    pub fn new(
        function_id: FunctionId,
        entries: impl IntoIterator<Item = ProfileEntry>,
        slo_latency_ms: f64,
        mem: MemorySpec,
    ) -> Result<Self, ProfileError> {
        if !(slo_latency_ms.is_finite() && slo_latency_ms > 0.0) {
            return Err(ProfileError::InvalidValue(format!(
                "slo_ms must be positive, got {slo_latency_ms}"
            )));
        }
        let mut map = BTreeMap::new();
        for entry in entries {
            validate_entry(&entry)?;
            if map.insert(entry.point, entry).is_some() {
                return Err(ProfileError::Conflict {
                    function_id,
                    point: entry.point,
                });
            }
        }
        Ok(Self {
            function_id,
            entries: map,
            slo_latency_ms,
            mem,
        })
    }

    pub fn function_id(&self) -> &FunctionId {
        &self.function_id
    }

    pub fn slo_latency_ms(&self) -> f64 {
        self.slo_latency_ms
    }

    pub fn memory(&self) -> MemorySpec {
        self.mem
    }

    pub fn with_slo(mut self, slo_latency_ms: f64) -> Self {
        self.slo_latency_ms = slo_latency_ms;
        self
    }

    pub fn with_memory(mut self, mem: MemorySpec) -> Self {
        self.mem = mem;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in point order.
    pub fn entries(&self) -> impl Iterator<Item = &ProfileEntry> {
        self.entries.values()
    }

    pub fn points(&self) -> impl Iterator<Item = ConfigPoint> + '_ {
        self.entries.keys().copied()
    }

    pub fn entry(&self, point: ConfigPoint) -> Option<&ProfileEntry> {
        self.entries.get(&point)
    }

    /// Stored throughput at `point`; never interpolates.
    pub fn throughput_at(&self, point: ConfigPoint) -> Result<f64, ProfileError> {
        self.entries
            .get(&point)
            .map(|e| e.throughput_rps)
            .ok_or_else(|| ProfileError::MissingConfiguration {
                function_id: self.function_id.clone(),
                point,
            })
    }

    /// Requests per second per unit of resource: `T / (sm_fraction * quota)`.
    pub fn rpr(&self, point: ConfigPoint) -> Result<f64, ProfileError> {
        Ok(rpr_of(self.throughput_at(point)?, point))
    }

    /// Rate at which a pod configured at `point` serves requests while it
    /// actually holds the GPU: the stored full-quota throughput at the same SM
    /// partition, or the quota-proportional extrapolation `T / quota` when the
    /// full-quota point was not profiled.
    pub fn running_rate(&self, point: ConfigPoint) -> Result<f64, ProfileError> {
        match self.entries.get(&point.at_full_quota()) {
            Some(e) => Ok(e.throughput_rps),
            None => Ok(self.throughput_at(point)? / point.quota()),
        }
    }

    /// Quota- and SM-axis monotonicity violations. These are warnings only:
    /// real measurements are noisy.
    pub fn monotonicity_warnings(&self) -> Vec<MonotonicityWarning> {
        let mut out = Vec::new();
        let mut by_sm: BTreeMap<u64, Vec<&ProfileEntry>> = BTreeMap::new();
        let mut by_quota: BTreeMap<u64, Vec<&ProfileEntry>> = BTreeMap::new();
        for e in self.entries.values() {
            by_sm.entry(e.point.sm_partition.to_bits()).or_default().push(e);
            by_quota.entry(e.point.quota.to_bits()).or_default().push(e);
        }
        let mut scan = |mut row: Vec<&ProfileEntry>, axis: MonotonicityAxis| {
            row.sort_by(|a, b| match axis {
                MonotonicityAxis::Quota => a.point.quota.total_cmp(&b.point.quota),
                MonotonicityAxis::Sm => a.point.sm_partition.total_cmp(&b.point.sm_partition),
            });
            for pair in row.windows(2) {
                if pair[0].throughput_rps > pair[1].throughput_rps {
                    out.push(MonotonicityWarning {
                        function_id: self.function_id.clone(),
                        axis,
                        lower: pair[0].point,
                        higher: pair[1].point,
                        lower_rps: pair[0].throughput_rps,
                        higher_rps: pair[1].throughput_rps,
                    });
                }
            }
        };
        for row in by_sm.into_values() {
            scan(row, MonotonicityAxis::Quota);
        }
        for row in by_quota.into_values() {
            scan(row, MonotonicityAxis::Sm);
        }
        out
    }
}

pub fn rpr_of(throughput_rps: f64, point: ConfigPoint) -> f64 {
    throughput_rps / point.second_cores()
}

fn validate_entry(entry: &ProfileEntry) -> Result<(), ProfileError> {
    if !(entry.throughput_rps.is_finite() && entry.throughput_rps >= 0.0) {
        return Err(ProfileError::InvalidValue(format!(
            "throughput_rps must be finite and non-negative, got {}",
            entry.throughput_rps
        )));
    }
    if !(entry.p99_latency_ms.is_finite() && entry.p99_latency_ms > 0.0) {
        return Err(ProfileError::InvalidValue(format!(
            "p99_ms must be positive, got {}",
            entry.p99_latency_ms
        )));
    }
    Ok(())
}

/// The 5 x 7 profiling grid: quotas 20..100% and SM partitions 6..100%.
pub fn standard_grid() -> Vec<ConfigPoint> {
    let mut grid = Vec::with_capacity(STANDARD_QUOTAS.len() * STANDARD_SM_PARTITIONS.len());
    for &sm in &STANDARD_SM_PARTITIONS {
        for &q in &STANDARD_QUOTAS {
            grid.push(ConfigPoint::new(sm, q).expect("standard grid is in range"));
        }
    }
    grid
}

/// Synthetic profile, proportional in quota and saturating in SM at `sm_knee`:
/// `T(S, Q) = Q * t_max * min(S, sm_knee) / sm_knee`.
///
/// The p99 latency of each point is the service time of one request at the
/// point's running rate. SLO and memory take defaults; override them with
/// [`FunctionProfile::with_slo`] / [`FunctionProfile::with_memory`].
pub fn synth_profile(
    function_id: FunctionId,
    t_max: f64,
    sm_knee: f64,
    grid: &[ConfigPoint],
) -> Result<FunctionProfile, ProfileError> {
    if !(t_max.is_finite() && t_max > 0.0) {
        return Err(ProfileError::InvalidValue(format!(
            "t_max must be positive, got {t_max}"
        )));
    }
    if !(sm_knee > 0.0 && sm_knee <= 100.0) {
        return Err(ProfileError::InvalidValue(format!(
            "sm_knee must be in (0, 100], got {sm_knee}"
        )));
    }
    if grid.is_empty() {
        return Err(ProfileError::EmptyGrid);
    }
    let entries = grid.iter().map(|&point| {
        let full = t_max * point.sm_partition().min(sm_knee) / sm_knee;
        ProfileEntry {
            point,
            throughput_rps: point.quota() * full,
            p99_latency_ms: 1000.0 / full,
        }
    });
    FunctionProfile::new(function_id, entries, DEFAULT_SLO_MS, MemorySpec::default())
}

/// Flat record used by both profile file formats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub function_id: FunctionId,
    pub sm_partition: f64,
    pub quota: f64,
    pub throughput_rps: f64,
    pub p99_ms: f64,
    pub slo_ms: f64,
    pub mem_noshare_mb: u64,
    pub mem_runtime_mb: u64,
    pub mem_server_mb: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileFormat {
    Csv,
    JsonLines,
}

impl ProfileFormat {
    /// `.jsonl`, `.ndjson` and `.json` are JSON lines; everything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "ndjson" | "json") => ProfileFormat::JsonLines,
            _ => ProfileFormat::Csv,
        }
    }
}

/// Reads every function in a profile source, in order of first appearance.
pub fn ingest_profiles<R: Read>(
    source: R,
    format: ProfileFormat,
) -> Result<Vec<FunctionProfile>, ProfileError> {
    let records = match format {
        ProfileFormat::Csv => read_csv_records(source)?,
        ProfileFormat::JsonLines => read_jsonl_records(source)?,
    };
    if records.is_empty() {
        return Err(ProfileError::Empty);
    }
    assemble(records)
}

/// Reads a source that must describe exactly one function.
pub fn ingest_profile<R: Read>(
    source: R,
    format: ProfileFormat,
) -> Result<FunctionProfile, ProfileError> {
    let mut all = ingest_profiles(source, format)?;
    match all.len() {
        1 => Ok(all.pop().expect("len checked")),
        n => Err(ProfileError::MultipleFunctions(n)),
    }
}

pub fn load_profiles(path: &Path) -> Result<Vec<FunctionProfile>, ProfileError> {
    let file = File::open(path)?;
    ingest_profiles(BufReader::new(file), ProfileFormat::from_path(path))
}

fn read_csv_records<R: Read>(source: R) -> Result<Vec<(u64, ProfileRecord)>, ProfileError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers().map_err(|e| csv_error(e, 1))?.clone();
    if headers.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(ProfileError::Parse {
            line: 1,
            message: format!("expected header `{}`", CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for result in reader.deserialize::<ProfileRecord>() {
        match result {
            Ok(rec) => {
                // Header is line 1; records follow one per line.
                let line = out.len() as u64 + 2;
                out.push((line, rec));
            }
            Err(e) => {
                let fallback = out.len() as u64 + 2;
                return Err(csv_error(e, fallback));
            }
        }
    }
    Ok(out)
}

fn csv_error(e: csv::Error, fallback_line: u64) -> ProfileError {
    let line = e.position().map(|p| p.line()).unwrap_or(fallback_line);
    ProfileError::Parse {
        line,
        message: e.to_string(),
    }
}

fn read_jsonl_records<R: Read>(source: R) -> Result<Vec<(u64, ProfileRecord)>, ProfileError> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(source).lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProfileRecord = serde_json::from_str(&line).map_err(|e| ProfileError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, rec));
    }
    Ok(out)
}

fn assemble(records: Vec<(u64, ProfileRecord)>) -> Result<Vec<FunctionProfile>, ProfileError> {
    struct Pending {
        slo_ms: f64,
        mem: MemorySpec,
        entries: BTreeMap<ConfigPoint, ProfileEntry>,
    }
    let mut order: Vec<FunctionId> = Vec::new();
    let mut pending: BTreeMap<FunctionId, Pending> = BTreeMap::new();
    for (line, rec) in records {
        let point = ConfigPoint::new(rec.sm_partition, rec.quota).map_err(|e| {
            ProfileError::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let mem = MemorySpec::new(rec.mem_noshare_mb, rec.mem_runtime_mb, rec.mem_server_mb)
            .map_err(|e| ProfileError::Parse {
                line,
                message: e.to_string(),
            })?;
        let entry = ProfileEntry {
            point,
            throughput_rps: rec.throughput_rps,
            p99_latency_ms: rec.p99_ms,
        };
        validate_entry(&entry).map_err(|e| ProfileError::Parse {
            line,
            message: e.to_string(),
        })?;
        let slot = pending.entry(rec.function_id.clone()).or_insert_with(|| {
            order.push(rec.function_id.clone());
            Pending {
                slo_ms: rec.slo_ms,
                mem,
                entries: BTreeMap::new(),
            }
        });
        if slot.slo_ms.to_bits() != rec.slo_ms.to_bits() {
            return Err(ProfileError::Inconsistent {
                line,
                function_id: rec.function_id,
                field: "slo_ms",
            });
        }
        if slot.mem != mem {
            return Err(ProfileError::Inconsistent {
                line,
                function_id: rec.function_id,
                field: "memory columns",
            });
        }
        if slot.entries.insert(point, entry).is_some() {
            return Err(ProfileError::Conflict {
                function_id: rec.function_id,
                point,
            });
        }
    }
    order
        .into_iter()
        .map(|id| {
            let p = pending.remove(&id).expect("every ordered id is pending");
            FunctionProfile::new(id, p.entries.into_values(), p.slo_ms, p.mem)
        })
        .collect()
}

/// Flattens profiles into records, one per point, in point order.
pub fn to_records(profiles: &[FunctionProfile]) -> Vec<ProfileRecord> {
    profiles
        .iter()
        .flat_map(|p| {
            p.entries().map(move |e| ProfileRecord {
                function_id: p.function_id.clone(),
                sm_partition: e.point.sm_partition(),
                quota: e.point.quota(),
                throughput_rps: e.throughput_rps,
                p99_ms: e.p99_latency_ms,
                slo_ms: p.slo_latency_ms,
                mem_noshare_mb: p.mem.mem_noshare_mb,
                mem_runtime_mb: p.mem.mem_runtime_mb,
                mem_server_mb: p.mem.mem_server_mb,
            })
        })
        .collect()
}

pub fn write_profiles<W: Write>(
    profiles: &[FunctionProfile],
    format: ProfileFormat,
    mut out: W,
) -> Result<(), ProfileError> {
    let records = to_records(profiles);
    match format {
        ProfileFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for rec in &records {
                w.serialize(rec).map_err(|e| ProfileError::Io(e.into()))?;
            }
            w.flush()?;
        }
        ProfileFormat::JsonLines => {
            for rec in &records {
                serde_json::to_writer(&mut out, rec).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}
