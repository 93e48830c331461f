//! Uniform-grid index with an occupancy pyramid.
//!
//! Points are bucketed into a cube grid (cell size ≈ scene bound / 32) with a
//! counting sort, so builds are O(P) and allocation-light. Queries run a
//! best-first traversal over the occupancy pyramid: blocks are visited in
//! order of the exact squared distance from the query to their AABB, so the
//! search touches only occupied regions and terminates as soon as no block
//! can contain a closer point than the current K-th candidate. Results are
//! exact under the (distance, index) ordering.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::{dist2, Candidates, KnnResult, SpatialIndex};
use crate::error::{Error, Result};
use crate::points::PointCloud;

/// Finest level is `CELLS` per axis (scene bound / 32 cell size over the
/// doubled extent).
const CELLS: usize = 64;

#[derive(Debug)]
pub struct GridIndex {
    positions: Vec<f64>,
    /// Grid origin (low corner) and cell size; the grid always covers every
    /// indexed point even if some lie outside the nominal scene bound.
    origin: f64,
    cell: f64,
    /// CSR over cells: sorted point ids per cell.
    cell_start: Vec<u32>,
    point_ids: Vec<u32>,
    /// Occupancy bitmaps from full resolution down to 1³, one bit per block.
    levels: Vec<Level>,
}

#[derive(Debug)]
struct Level {
    blocks: usize,
    bits: Vec<u64>,
}

impl Level {
    fn occupied(&self, x: usize, y: usize, z: usize) -> bool {
        let i = (z * self.blocks + y) * self.blocks + x;
        self.bits[i >> 6] & (1 << (i & 63)) != 0
    }

    fn set(&mut self, x: usize, y: usize, z: usize) {
        let i = (z * self.blocks + y) * self.blocks + x;
        self.bits[i >> 6] |= 1 << (i & 63);
    }
}

impl GridIndex {
    pub fn build(cloud: &PointCloud, scene_bound: f64) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::contract("build_index", "empty point cloud"));
        }
        if scene_bound <= 0.0 {
            return Err(Error::contract("build_index", "scene bound must be positive"));
        }
        let p = cloud.len();
        crate::tensor::check_finite_slice("build_index", &cloud.positions)?;
        // Expand the half-extent if any point lies outside the nominal bound
        // so block AABBs always contain their points.
        let max_abs = cloud.positions.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let half = scene_bound.max(max_abs * (1.0 + 1e-12) + f64::MIN_POSITIVE);
        let origin = -half;
        let cell = 2.0 * half / CELLS as f64;

        let cell_of = |v: f64| -> usize {
            (((v - origin) / cell) as usize).min(CELLS - 1)
        };
        let mut counts = vec![0u32; CELLS * CELLS * CELLS + 1];
        let mut cells = Vec::with_capacity(p);
        for i in 0..p {
            let (x, y, z) = (
                cell_of(cloud.positions[i * 3]),
                cell_of(cloud.positions[i * 3 + 1]),
                cell_of(cloud.positions[i * 3 + 2]),
            );
            let c = (z * CELLS + y) * CELLS + x;
            cells.push(c);
            counts[c + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let cell_start = counts.clone();
        let mut point_ids = vec![0u32; p];
        let mut cursor = counts;
        // ascending point id within each cell (stable counting sort)
        for (i, &c) in cells.iter().enumerate() {
            point_ids[cursor[c] as usize] = i as u32;
            cursor[c] += 1;
        }

        // occupancy pyramid: level 0 = CELLS per axis, halving per level
        let mut levels = Vec::new();
        let mut blocks = CELLS;
        loop {
            let words = (blocks * blocks * blocks).div_ceil(64);
            levels.push(Level { blocks, bits: vec![0u64; words] });
            if blocks == 1 {
                break;
            }
            blocks /= 2;
        }
        for &c in &cells {
            let (x, y, z) = (c % CELLS, (c / CELLS) % CELLS, c / (CELLS * CELLS));
            for (li, level) in levels.iter_mut().enumerate() {
                level.set(x >> li, y >> li, z >> li);
            }
        }

        Ok(GridIndex {
            positions: cloud.positions.clone(),
            origin,
            cell,
            cell_start,
            point_ids,
            levels,
        })
    }

    /// Squared distance from `q` to the AABB of block (x, y, z) at `level`.
    #[inline]
    fn block_dist2(&self, q: [f64; 3], level: usize, bx: usize, by: usize, bz: usize) -> f64 {
        let size = self.cell * (1 << level) as f64;
        let mut acc = 0.0;
        for (a, &b) in [bx, by, bz].iter().enumerate() {
            let lo = self.origin + b as f64 * size;
            let hi = lo + size;
            let v = q[a];
            let d = if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                0.0
            };
            acc += d * d;
        }
        acc
    }
}

/// Heap entry ordered by block distance (min-heap via `Reverse`).
#[derive(Debug, PartialEq)]
struct Entry {
    d2: f64,
    level: u8,
    x: u32,
    y: u32,
    z: u32,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then_with(|| (self.level, self.x, self.y, self.z).cmp(&(other.level, other.x, other.y, other.z)))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex for GridIndex {
    fn point_count(&self) -> usize {
        self.positions.len() / 3
    }

    fn positions(&self) -> &[f64] {
        &self.positions
    }

    fn query_capped(&self, x: [f64; 3], k: usize, radius_cap: Option<f64>, hint: Option<f64>) -> KnnResult {
        let cap2 = radius_cap.map(|c| c * c);
        let hint2 = hint.map(|h| h * h);
        let mut cands = Candidates::new(k);
        let top_level = self.levels.len() - 1;

        // Warm scan of the 3×3×3 cell neighborhood around the query; for
        // near-surface queries this already finds the neighbors and the
        // pyramid pass below mostly just confirms the bound. The pyramid
        // skips these cells to avoid double-counting.
        let home = [0, 1, 2].map(|a| {
            let g = ((x[a] - self.origin) / self.cell).floor();
            (g.clamp(0.0, (CELLS - 1) as f64)) as usize
        });
        for dz in home[2].saturating_sub(1)..=(home[2] + 1).min(CELLS - 1) {
            for dy in home[1].saturating_sub(1)..=(home[1] + 1).min(CELLS - 1) {
                for dx in home[0].saturating_sub(1)..=(home[0] + 1).min(CELLS - 1) {
                    if !self.levels[0].occupied(dx, dy, dz) {
                        continue;
                    }
                    let c = (dz * CELLS + dy) * CELLS + dx;
                    let start = self.cell_start[c] as usize;
                    let end = self.cell_start[c + 1] as usize;
                    for &pid in &self.point_ids[start..end] {
                        let p = &self.positions[pid as usize * 3..pid as usize * 3 + 3];
                        let d2 = dist2([p[0], p[1], p[2]], x);
                        if let Some(c2) = cap2 {
                            if d2 > c2 {
                                continue;
                            }
                        }
                        cands.offer(d2, pid);
                    }
                }
            }
        }
        let prescanned = |bx: usize, by: usize, bz: usize| -> bool {
            bx.abs_diff(home[0]) <= 1 && by.abs_diff(home[1]) <= 1 && bz.abs_diff(home[2]) <= 1
        };

        let mut heap: BinaryHeap<Reverse<Entry>> = BinaryHeap::with_capacity(64);
        heap.push(Reverse(Entry {
            d2: self.block_dist2(x, top_level, 0, 0, 0),
            level: top_level as u8,
            x: 0,
            y: 0,
            z: 0,
        }));

        // A block is worth visiting while its distance can still beat the
        // current K-th candidate (or the caller-provided upper bound).
        let beats = |d2: f64, cands: &Candidates| -> bool {
            if let Some(c2) = cap2 {
                if d2 > c2 {
                    return false;
                }
            }
            if let Some(h2) = hint2 {
                if d2 > h2 {
                    return false;
                }
            }
            match cands.worst() {
                Some(w) => d2 <= w,
                None => true,
            }
        };

        while let Some(Reverse(e)) = heap.pop() {
            if !beats(e.d2, &cands) {
                break;
            }
            let level = e.level as usize;
            if level == 0 {
                if prescanned(e.x as usize, e.y as usize, e.z as usize) {
                    continue;
                }
                let c = (e.z as usize * CELLS + e.y as usize) * CELLS + e.x as usize;
                let start = self.cell_start[c] as usize;
                let end = self.cell_start[c + 1] as usize;
                for &pid in &self.point_ids[start..end] {
                    let p = &self.positions[pid as usize * 3..pid as usize * 3 + 3];
                    let d2 = dist2([p[0], p[1], p[2]], x);
                    if let Some(c2) = cap2 {
                        if d2 > c2 {
                            continue;
                        }
                    }
                    cands.offer(d2, pid);
                }
            } else {
                let child_level = level - 1;
                let child_blocks = self.levels[child_level].blocks;
                for dz in 0..2u32 {
                    for dy in 0..2u32 {
                        for dx in 0..2u32 {
                            let (cx, cy, cz) = (e.x * 2 + dx, e.y * 2 + dy, e.z * 2 + dz);
                            if cx as usize >= child_blocks || cy as usize >= child_blocks || cz as usize >= child_blocks {
                                continue;
                            }
                            if !self.levels[child_level].occupied(cx as usize, cy as usize, cz as usize) {
                                continue;
                            }
                            let d2 = self.block_dist2(x, child_level, cx as usize, cy as usize, cz as usize);
                            if beats(d2, &cands) {
                                heap.push(Reverse(Entry {
                                    d2,
                                    level: child_level as u8,
                                    x: cx,
                                    y: cy,
                                    z: cz,
                                }));
                            }
                        }
                    }
                }
            }
        }
        cands.into_result()
    }
}
