// SPDX-License-Identifier: Apache-2.0

//! Independent reference implementations shared by the integration suites.
//! They favour plain loops and exhaustive search over the library's code
//! paths so a shared bug is unlikely.

#![allow(dead_code)]

use gshare_core::memory_model::{admit, MemoryBook};
use gshare_core::packer::{GpuNode, PodRequest, Rect};
use gshare_core::profiles::ConfigPoint;

const N: usize = 100;

/// Scale-up by hand: efficient point by exhaustive max, pod count by
/// repeated subtraction, residual point by scanning every candidate.
pub fn scale_up_oracle(entries: &[(ConfigPoint, f64)], gap: f64) -> Vec<ConfigPoint> {
    if entries.is_empty() || gap <= 0.0 {
        return Vec::new();
    }
    let rpr = |(p, t): &(ConfigPoint, f64)| t / p.second_cores();
    let top = entries.iter().map(rpr).fold(f64::NEG_INFINITY, f64::max);
    let mut eff = None;
    for e in entries {
        if rpr(e) >= top - 1e-9 * top.abs() {
            let better = match eff {
                None => true,
                Some((bp, _)) => {
                    let (a, b): (ConfigPoint, ConfigPoint) = (e.0, bp);
                    let (ka, kb) = (a.second_cores(), b.second_cores());
                    ka < kb || (ka == kb && a < b)
                }
            };
            if better {
                eff = Some(*e);
            }
        }
    }
    let (p_eff, t_eff) = eff.expect("non-empty");
    let tol = 1e-9 * gap.max(1.0);
    let mut out = Vec::new();
    let mut left = gap;
    while left >= t_eff - tol {
        out.push(p_eff);
        left -= t_eff;
    }
    if left > tol {
        let mut best: Option<(ConfigPoint, f64)> = None;
        for &(p, t) in entries {
            if t <= left {
                continue;
            }
            let replace = match best {
                None => true,
                Some((bp, bt)) => {
                    let (da, db) = (t - left, bt - left);
                    let (ka, kb) = (p.second_cores(), bp.second_cores());
                    da < db || (da == db && (ka < kb || (ka == kb && p < bp)))
                }
            };
            if replace {
                best = Some((p, t));
            }
        }
        out.push(best.map_or(p_eff, |(p, _)| p));
    }
    out
}

/// Occupancy grid of a node's placements, indexed `[x][y]`.
pub fn occupancy(node: &GpuNode) -> Vec<[bool; N]> {
    let mut grid = vec![[false; N]; N];
    for p in node.placements.values() {
        for x in p.rect.x..p.rect.x + p.rect.w {
            for y in p.rect.y..p.rect.y + p.rect.h {
                grid[x as usize][y as usize] = true;
            }
        }
    }
    grid
}

/// Whether some `w x h` window of the grid is entirely unoccupied.
pub fn raster_fits(node: &GpuNode, w: u32, h: u32) -> bool {
    let grid = occupancy(node);
    // prefix[x][y] = occupied cells in [0, x) x [0, y)
    let mut prefix = vec![[0u32; N + 1]; N + 1];
    for x in 0..N {
        for y in 0..N {
            prefix[x + 1][y + 1] = prefix[x][y + 1] + prefix[x + 1][y] - prefix[x][y] + u32::from(grid[x][y]);
        }
    }
    let (w, h) = (w as usize, h as usize);
    if w > N || h > N {
        return false;
    }
    for x in 0..=N - w {
        for y in 0..=N - h {
            let used = prefix[x + w][y + h] + prefix[x][y] - prefix[x][y + h] - prefix[x + w][y];
            if used == 0 {
                return true;
            }
        }
    }
    false
}

/// Best-area-fit by exhaustive scan of every node's free list.
pub fn best_match_oracle(nodes: &[GpuNode], req: &PodRequest, book: &MemoryBook) -> Option<(usize, Rect)> {
    let mut best: Option<(u32, usize, Rect)> = None;
    for node in nodes {
        if !admit(&node.mem, book, &req.function_id) {
            continue;
        }
        for r in &node.free_rects {
            if r.w < req.w || r.h < req.h {
                continue;
            }
            let leftover = r.w * r.h - req.w * req.h;
            let key = (leftover, node.gpu_id, r.y, r.x, r.w, r.h);
            let better = match best {
                None => true,
                Some((bl, bg, br)) => key < (bl, bg, br.y, br.x, br.w, br.h),
            };
            if better {
                best = Some((leftover, node.gpu_id, *r));
            }
        }
    }
    best.map(|(_, g, r)| (g, r))
}
