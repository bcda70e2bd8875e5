// SPDX-License-Identifier: Apache-2.0

//! Maximal-rectangles node selection.
//!
//! A GPU is a `100 x 100` square: quota percent along x, SM percent along y.
//! Each GPU keeps a list of free rectangles that may overlap but never contain
//! one another. A pod is matched against every free rectangle of every open
//! GPU and goes to the one with the least leftover area (global best area
//! fit). Placing it splits the chosen rectangle into its two maximal
//! residuals, subdivides every other free rectangle it overlaps, and prunes
//! contained rectangles.
//!
//! Released rectangles are appended to the free list unchanged so an
//! identical successor pod can reuse them exactly. When the free list grows
//! past a threshold the GPU is rebuilt from scratch and its pods re-placed.
//!
//! Coordinates are integers in percent, so all geometry is exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::ids::{FunctionId, PodId};
use crate::memory_model::{admit, GpuMemoryState, MemoryBook, MemoryError};
use crate::resource::ResourceConfig;

/// Side length of a GPU in percent units.
pub const FULL: u32 = 100;
pub const FULL_AREA: u32 = FULL * FULL;
pub const DEFAULT_RESTRUCTURE_THRESHOLD: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum PackError {
    #[error("rectangle ({x},{y},{w},{h}) is outside the GPU or empty")]
    InvalidRect { x: u32, y: u32, w: u32, h: u32 },
    #[error("{what} {value} is not a whole percent")]
    NonIntegral { what: &'static str, value: f64 },
    #[error("rectangle {0} is not free on GPU {1}")]
    NotFree(Rect, usize),
    #[error("pod {pod} ({w}x{h}) does not fit in {rect}")]
    DoesNotFit { pod: PodId, w: u32, h: u32, rect: Rect },
    #[error("pod {0} is already placed")]
    AlreadyPlaced(PodId),
    #[error("pod {0} is not placed on this GPU")]
    UnknownPod(PodId),
    #[error("restructure of GPU {0} could not re-place every pod")]
    RestructureInfeasible(usize),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Axis-aligned rectangle; `x`/`w` on the quota axis, `y`/`h` on the SM axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x, self.y, self.w, self.h)
    }
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self, PackError> {
        if w == 0 || h == 0 || x + w > FULL || y + h > FULL {
            return Err(PackError::InvalidRect { x, y, w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn full() -> Self {
        Self {
            x: 0,
            y: 0,
            w: FULL,
            h: FULL,
        }
    }

    /// "secondCores": quota percent times SM percent.
    pub fn area(&self) -> u32 {
        self.w * self.h
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn top(&self) -> u32 {
        self.y + self.h
    }

    pub fn fits(&self, w: u32, h: u32) -> bool {
        w <= self.w && h <= self.h
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.top() <= self.top()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.right() && other.x < self.right() && self.y < other.top() && other.y < self.top()
    }

    /// Maximal pieces of `self` outside `used`: left, right, below and above
    /// the overlap, each spanning the full extent of `self` in the other axis.
    /// Empty pieces are omitted.
    pub fn subdivide(&self, used: &Rect) -> Vec<Rect> {
        let mut out = Vec::with_capacity(4);
        if !self.intersects(used) {
            out.push(*self);
            return out;
        }
        if used.x > self.x {
            out.push(Rect { x: self.x, y: self.y, w: used.x - self.x, h: self.h });
        }
        if used.right() < self.right() {
            out.push(Rect { x: used.right(), y: self.y, w: self.right() - used.right(), h: self.h });
        }
        if used.y > self.y {
            out.push(Rect { x: self.x, y: self.y, w: self.w, h: used.y - self.y });
        }
        if used.top() < self.top() {
            out.push(Rect { x: self.x, y: used.top(), w: self.w, h: self.top() - used.top() });
        }
        out
    }
}

/// A pod waiting for node selection: `w` is the quota limit in percent,
/// `h` the SM partition in percent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PodRequest {
    pub pod_id: PodId,
    pub function_id: FunctionId,
    pub w: u32,
    pub h: u32,
}

fn whole_percent(what: &'static str, value: f64) -> Result<u32, PackError> {
    let r = value.round();
    if (value - r).abs() > 1e-6 || r < 1.0 || r > f64::from(FULL) {
        return Err(PackError::NonIntegral { what, value });
    }
    Ok(r as u32)
}

impl PodRequest {
    pub fn new(pod_id: PodId, function_id: FunctionId, w: u32, h: u32) -> Result<Self, PackError> {
        if w == 0 || h == 0 || w > FULL || h > FULL {
            return Err(PackError::InvalidRect { x: 0, y: 0, w, h });
        }
        Ok(Self { pod_id, function_id, w, h })
    }

    /// Width is the quota limit, the isolation ceiling.
    pub fn from_config(pod_id: PodId, function_id: FunctionId, config: &ResourceConfig) -> Result<Self, PackError> {
        let w = whole_percent("quota_limit", config.quota_limit * 100.0)?;
        let h = whole_percent("sm_partition", config.sm_partition)?;
        Self::new(pod_id, function_id, w, h)
    }

    pub fn area(&self) -> u32 {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub rect: Rect,
    pub function_id: FunctionId,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpuNode {
    pub gpu_id: usize,
    pub free_rects: Vec<Rect>,
    pub placements: BTreeMap<PodId, Placement>,
    pub mem: GpuMemoryState,
}

impl GpuNode {
    pub fn new(gpu_id: usize, capacity_mb: u64) -> Self {
        Self {
            gpu_id,
            free_rects: vec![Rect::full()],
            placements: BTreeMap::new(),
            mem: GpuMemoryState::new(capacity_mb),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn placed_area(&self) -> u32 {
        self.placements.values().map(|p| p.rect.area()).sum()
    }

    /// `1 - largest free rectangle / total free area`; 0 when nothing is free.
    pub fn fragmentation(&self) -> f64 {
        let free = FULL_AREA - self.placed_area();
        if free == 0 {
            return 0.0;
        }
        let largest = self.free_rects.iter().map(Rect::area).max().unwrap_or(0);
        1.0 - f64::from(largest) / f64::from(free)
    }
}

pub fn area(rect: &Rect) -> u32 {
    rect.area()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum MatchOutcome {
    Found { gpu_id: usize, rect: Rect },
    NewGpuRequired,
}

/// Ordering key of a candidate: leftover area, then GPU id, then the
/// rectangle's bottom-left corner, then its shape.
type MatchKey = (u32, usize, u32, u32, u32, u32);

fn node_best(node: &GpuNode, req: &PodRequest, book: &MemoryBook) -> Option<MatchKey> {
    if !admit(&node.mem, book, &req.function_id) {
        return None;
    }
    node.free_rects
        .iter()
        .filter(|r| r.fits(req.w, req.h))
        .map(|r| (r.area() - req.area(), node.gpu_id, r.y, r.x, r.w, r.h))
        .min()
}

fn key_outcome(key: Option<MatchKey>) -> MatchOutcome {
    match key {
        Some((_, gpu_id, y, x, w, h)) => MatchOutcome::Found {
            gpu_id,
            rect: Rect { x, y, w, h },
        },
        None => MatchOutcome::NewGpuRequired,
    }
}

/// Best-area-fit search across all GPUs, one GPU at a time.
pub fn best_match_seq(nodes: &[GpuNode], req: &PodRequest, book: &MemoryBook) -> MatchOutcome {
    key_outcome(nodes.iter().filter_map(|n| node_best(n, req, book)).min())
}

/// Best-area-fit search with GPUs scanned in parallel. Same result as
/// [`best_match_seq`]: the key is a total order.
#[cfg(feature = "parallel")]
pub fn best_match_par(nodes: &[GpuNode], req: &PodRequest, book: &MemoryBook) -> MatchOutcome {
    use rayon::prelude::*;
    key_outcome(nodes.par_iter().filter_map(|n| node_best(n, req, book)).min())
}

/// Free rectangle with the least leftover area among those that contain the
/// pod and sit on a GPU with memory for it.
pub fn best_match(nodes: &[GpuNode], req: &PodRequest, book: &MemoryBook) -> MatchOutcome {
    #[cfg(feature = "parallel")]
    {
        best_match_par(nodes, req, book)
    }
    #[cfg(not(feature = "parallel"))]
    {
        best_match_seq(nodes, req, book)
    }
}

/// Places `req` at the bottom-left corner of the free rectangle `rect`.
pub fn place(node: &mut GpuNode, rect: Rect, req: &PodRequest) -> Result<(), PackError> {
    let idx = node
        .free_rects
        .iter()
        .position(|r| *r == rect)
        .ok_or(PackError::NotFree(rect, node.gpu_id))?;
    if !rect.fits(req.w, req.h) {
        return Err(PackError::DoesNotFit {
            pod: req.pod_id.clone(),
            w: req.w,
            h: req.h,
            rect,
        });
    }
    if node.placements.contains_key(&req.pod_id) {
        return Err(PackError::AlreadyPlaced(req.pod_id.clone()));
    }
    let used = Rect {
        x: rect.x,
        y: rect.y,
        w: req.w,
        h: req.h,
    };

    // Split: the chosen rectangle gives way to its right and upper residuals.
    node.free_rects.swap_remove(idx);
    let mut next = Vec::with_capacity(node.free_rects.len() + 4);
    if rect.w > req.w {
        next.push(Rect { x: rect.x + req.w, y: rect.y, w: rect.w - req.w, h: rect.h });
    }
    if rect.h > req.h {
        next.push(Rect { x: rect.x, y: rect.y + req.h, w: rect.w, h: rect.h - req.h });
    }

    // Intersection update on everything else.
    for r in node.free_rects.drain(..) {
        if r.intersects(&used) {
            next.extend(r.subdivide(&used));
        } else {
            next.push(r);
        }
    }

    node.free_rects = prune_contained(next);
    node.placements.insert(
        req.pod_id.clone(),
        Placement {
            rect: used,
            function_id: req.function_id.clone(),
        },
    );
    node.mem.add_pod(&req.function_id);
    Ok(())
}

/// Drops every rectangle contained in another one (one copy of duplicates
/// survives). Output is sorted for determinism.
pub fn prune_contained(mut rects: Vec<Rect>) -> Vec<Rect> {
    rects.sort_unstable();
    rects.dedup();
    let keep: Vec<bool> = rects
        .iter()
        .enumerate()
        .map(|(i, r)| !rects.iter().enumerate().any(|(j, o)| i != j && o.contains(r)))
        .collect();
    rects
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect()
}

/// Removes a pod and hands its rectangle back to the free list verbatim.
pub fn release(node: &mut GpuNode, pod_id: &PodId) -> Result<Rect, PackError> {
    let placement = node
        .placements
        .remove(pod_id)
        .ok_or_else(|| PackError::UnknownPod(pod_id.clone()))?;
    node.mem.remove_pod(&placement.function_id)?;
    node.free_rects.push(placement.rect);
    Ok(placement.rect)
}

/// Order in which a rebuilt GPU re-places its pods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum RestructureOrder {
    #[default]
    DescendingArea,
    PodId,
}

/// Rebuilds the free list from a single full rectangle and re-places every
/// pod when the list holds more than `threshold` rectangles. An empty GPU is
/// always reset. Returns whether the node was rebuilt; on failure the node is
/// left untouched.
pub fn restructure(node: &mut GpuNode, threshold: usize, order: RestructureOrder) -> Result<bool, PackError> {
    if node.placements.is_empty() {
        let changed = node.free_rects != [Rect::full()];
        node.free_rects = vec![Rect::full()];
        return Ok(changed);
    }
    if node.free_rects.len() <= threshold {
        return Ok(false);
    }
    let mut pods: Vec<(PodId, Placement)> = node.placements.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    if order == RestructureOrder::DescendingArea {
        pods.sort_by(|a, b| b.1.rect.area().cmp(&a.1.rect.area()).then_with(|| a.0.cmp(&b.0)));
    }
    let mut fresh = GpuNode::new(node.gpu_id, node.mem.capacity_mb);
    for (pod_id, p) in pods {
        let req = PodRequest {
            pod_id,
            function_id: p.function_id,
            w: p.rect.w,
            h: p.rect.h,
        };
        let target = fresh
            .free_rects
            .iter()
            .filter(|r| r.fits(req.w, req.h))
            .min_by_key(|r| (r.area() - req.area(), r.y, r.x, r.w, r.h))
            .copied()
            .ok_or(PackError::RestructureInfeasible(node.gpu_id))?;
        place(&mut fresh, target, &req)?;
    }
    fresh.mem = node.mem.clone();
    *node = fresh;
    Ok(true)
}

/// A fixed fleet of GPUs. Only GPUs hosting pods are open; a GPU is opened
/// when no open one can take a pod and closed again once it empties.
#[derive(Debug, Clone, Serialize)]
pub struct Cluster {
    nodes: Vec<GpuNode>,
    idle: BTreeSet<usize>,
    capacity_mb: u64,
}

impl Cluster {
    pub fn new(fleet_size: usize, capacity_mb: u64) -> Self {
        Self {
            nodes: Vec::new(),
            idle: (0..fleet_size).collect(),
            capacity_mb,
        }
    }

    pub fn open_nodes(&self) -> &[GpuNode] {
        &self.nodes
    }

    pub fn node(&self, gpu_id: usize) -> Option<&GpuNode> {
        self.nodes.iter().find(|n| n.gpu_id == gpu_id)
    }

    pub fn gpus_in_use(&self) -> usize {
        self.nodes.len()
    }

    pub fn idle_gpus(&self) -> usize {
        self.idle.len()
    }

    /// Places a pod, opening a new GPU if needed. `Ok(None)` means the fleet
    /// has no room.
    pub fn schedule(&mut self, req: &PodRequest, book: &MemoryBook) -> Result<Option<usize>, PackError> {
        if let MatchOutcome::Found { gpu_id, rect } = best_match(&self.nodes, req, book) {
            let node = self.nodes.iter_mut().find(|n| n.gpu_id == gpu_id).expect("matched node is open");
            place(node, rect, req)?;
            return Ok(Some(gpu_id));
        }
        let Some(&gpu_id) = self.idle.iter().next() else {
            return Ok(None);
        };
        let mut node = GpuNode::new(gpu_id, self.capacity_mb);
        if !admit(&node.mem, book, &req.function_id) {
            return Ok(None);
        }
        place(&mut node, Rect::full(), req)?;
        self.idle.remove(&gpu_id);
        let at = self.nodes.partition_point(|n| n.gpu_id < gpu_id);
        self.nodes.insert(at, node);
        Ok(Some(gpu_id))
    }

    /// Releases a pod wherever it is placed; closes the GPU if it empties.
    pub fn unschedule(&mut self, pod_id: &PodId) -> Result<usize, PackError> {
        let idx = self
            .nodes
            .iter()
            .position(|n| n.placements.contains_key(pod_id))
            .ok_or_else(|| PackError::UnknownPod(pod_id.clone()))?;
        let gpu_id = self.nodes[idx].gpu_id;
        release(&mut self.nodes[idx], pod_id)?;
        if self.nodes[idx].is_empty() {
            self.nodes.remove(idx);
            self.idle.insert(gpu_id);
        }
        Ok(gpu_id)
    }

    /// Restructures every open GPU; GPUs whose rebuild fails keep their state.
    /// Returns the ids that failed.
    pub fn restructure_all(&mut self, threshold: usize, order: RestructureOrder) -> Vec<usize> {
        let mut failed = Vec::new();
        for node in &mut self.nodes {
            if restructure(node, threshold, order).is_err() {
                failed.push(node.gpu_id);
            }
        }
        failed
    }

    /// `1 - largest free rectangle / total free area` across open GPUs.
    pub fn fragmentation(&self) -> f64 {
        let free: u32 = self.nodes.iter().map(|n| FULL_AREA - n.placed_area()).sum();
        if free == 0 {
            return 0.0;
        }
        let largest = self
            .nodes
            .iter()
            .flat_map(|n| n.free_rects.iter().map(Rect::area))
            .max()
            .unwrap_or(0);
        1.0 - f64::from(largest) / f64::from(free)
    }
}

pub mod verify {
    //! Brute-force geometric checks on a rasterized `100 x 100` grid.
    //! Independent of the splitting logic above; used by tests and the
    //! `pack-trace` command.

    use super::{GpuNode, Rect, FULL};

    const N: usize = FULL as usize;

    fn cells(r: &Rect) -> impl Iterator<Item = (usize, usize)> {
        let (x0, y0, x1, y1) = (r.x as usize, r.y as usize, r.right() as usize, r.top() as usize);
        (x0..x1).flat_map(move |x| (y0..y1).map(move |y| (x, y)))
    }

    fn in_bounds(r: &Rect) -> bool {
        r.w > 0 && r.h > 0 && r.right() <= FULL && r.top() <= FULL
    }

    /// Every breached invariant, described. Empty means the node is sound.
    pub fn check_node(node: &GpuNode) -> Vec<String> {
        let mut breaches = Vec::new();
        let mut placed = vec![[false; N]; N];
        for (pod, p) in &node.placements {
            if !in_bounds(&p.rect) {
                breaches.push(format!("placement of {pod} {} out of bounds", p.rect));
                continue;
            }
            for (x, y) in cells(&p.rect) {
                if placed[x][y] {
                    breaches.push(format!("placement of {pod} overlaps another at ({x},{y})"));
                    break;
                }
                placed[x][y] = true;
            }
        }
        let mut free = vec![[false; N]; N];
        for r in &node.free_rects {
            if !in_bounds(r) {
                breaches.push(format!("free rect {r} out of bounds"));
                continue;
            }
            for (x, y) in cells(r) {
                if placed[x][y] {
                    breaches.push(format!("free rect {r} overlaps a placement at ({x},{y})"));
                    break;
                }
                free[x][y] = true;
            }
        }
        'cover: for x in 0..N {
            for y in 0..N {
                if !placed[x][y] && !free[x][y] {
                    breaches.push(format!("cell ({x},{y}) is neither placed nor free"));
                    break 'cover;
                }
            }
        }
        for (i, a) in node.free_rects.iter().enumerate() {
            for (j, b) in node.free_rects.iter().enumerate() {
                if i != j && b.contains(a) {
                    breaches.push(format!("free rect {a} is contained in {b}"));
                }
            }
        }
        breaches
    }

    /// Area of the union of the free rectangles, counted cell by cell.
    pub fn free_cells(node: &GpuNode) -> u32 {
        let mut free = vec![[false; N]; N];
        for r in &node.free_rects {
            for (x, y) in cells(r) {
                free[x][y] = true;
            }
        }
        free.iter().map(|col| col.iter().filter(|c| **c).count() as u32).sum()
    }
}
