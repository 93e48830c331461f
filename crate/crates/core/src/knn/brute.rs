//! Brute-force exact KNN: the oracle every accelerated index must match.

use super::{Candidates, KnnResult, SpatialIndex};
use crate::error::{Error, Result};
use crate::points::PointCloud;

const MAX_INLINE_K: usize = 64;

/// Bounded (distance², index) selection over a distance buffer with a
/// stack-resident candidate array. Same ordering contract as `Candidates`.
fn select_inline(d2s: &[f64], k: usize, cap2: Option<f64>) -> KnnResult {
    let mut best = [(f64::INFINITY, u32::MAX); MAX_INLINE_K];
    let mut len = 0usize;
    let mut bound = cap2.unwrap_or(f64::INFINITY);
    for (i, &d2) in d2s.iter().enumerate() {
        if d2 <= bound {
            let idx = i as u32;
            if len == k {
                let last = best[k - 1];
                if (d2, idx) >= (last.0, last.1) {
                    continue;
                }
            } else {
                len += 1;
            }
            let mut pos = len - 1;
            while pos > 0 && (best[pos - 1].0, best[pos - 1].1) > (d2, idx) {
                best[pos] = best[pos - 1];
                pos -= 1;
            }
            best[pos] = (d2, idx);
            if len == k {
                bound = best[k - 1].0.min(cap2.unwrap_or(f64::INFINITY));
            }
        }
    }
    let mut indices = Vec::with_capacity(len);
    let mut distances = Vec::with_capacity(len);
    for &(d2, i) in &best[..len] {
        indices.push(i);
        distances.push(d2.sqrt());
    }
    KnnResult { indices, distances }
}

#[derive(Debug)]
pub struct BruteIndex {
    positions: Vec<f64>,
    // structure-of-arrays copy so the distance pass vectorizes
    xs: Vec<f64>,
    ys: Vec<f64>,
    zs: Vec<f64>,
}

impl BruteIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::contract("build_index", "empty point cloud"));
        }
        crate::tensor::check_finite_slice("build_index", &cloud.positions)?;
        let p = cloud.len();
        let mut xs = Vec::with_capacity(p);
        let mut ys = Vec::with_capacity(p);
        let mut zs = Vec::with_capacity(p);
        for q in cloud.positions.chunks_exact(3) {
            xs.push(q[0]);
            ys.push(q[1]);
            zs.push(q[2]);
        }
        Ok(BruteIndex {
            positions: cloud.positions.clone(),
            xs,
            ys,
            zs,
        })
    }
}

impl SpatialIndex for BruteIndex {
    fn point_count(&self) -> usize {
        self.positions.len() / 3
    }

    fn positions(&self) -> &[f64] {
        &self.positions
    }

    fn query_capped(&self, x: [f64; 3], k: usize, radius_cap: Option<f64>, _hint: Option<f64>) -> KnnResult {
        let mut scratch = vec![0.0; self.point_count()];
        self.query_with_scratch(x, k, radius_cap, &mut scratch)
    }

    /// Per-query results equal sequential queries; two-pass scan with a
    /// reused distance scratch per parallel chunk.
    fn query_batch(&self, xs: &[f64], k: usize, radius_cap: Option<f64>) -> Result<Vec<KnnResult>> {
        use rayon::prelude::*;
        self.validate_k(k)?;
        if xs.len() % 3 != 0 {
            return Err(Error::dim("knn_query_batch", "N×3 positions", format!("{} values", xs.len())));
        }
        let n = xs.len() / 3;
        const BATCH_CHUNK: usize = 256;
        let chunks: Vec<Vec<KnnResult>> = (0..n.div_ceil(BATCH_CHUNK))
            .into_par_iter()
            .map(|ci| {
                let start = ci * BATCH_CHUNK;
                let end = (start + BATCH_CHUNK).min(n);
                let mut scratch = vec![0.0; self.point_count()];
                (start..end)
                    .map(|qi| {
                        let x = [xs[qi * 3], xs[qi * 3 + 1], xs[qi * 3 + 2]];
                        self.query_with_scratch(x, k, radius_cap, &mut scratch)
                    })
                    .collect()
            })
            .collect();
        let mut results = Vec::with_capacity(n);
        for c in chunks {
            results.extend(c);
        }
        Ok(results)
    }
}

impl BruteIndex {
    fn query_with_scratch(&self, x: [f64; 3], k: usize, radius_cap: Option<f64>, scratch: &mut [f64]) -> KnnResult {
        let p = self.point_count();
        let (xs, ys, zs) = (&self.xs[..p], &self.ys[..p], &self.zs[..p]);
        let scratch = &mut scratch[..p];
        // Pass 1: branch-free squared distances (vectorizes over the SoA
        // copies; same dx*dx + dy*dy + dz*dz formula as `dist2`).
        for i in 0..p {
            let dx = xs[i] - x[0];
            let dy = ys[i] - x[1];
            let dz = zs[i] - x[2];
            scratch[i] = dx * dx + dy * dy + dz * dz;
        }
        let cap2 = radius_cap.map(|c| c * c);
        if k <= MAX_INLINE_K {
            select_inline(scratch, k, cap2)
        } else {
            let mut cands = Candidates::new(k);
            for (i, &d2) in scratch.iter().enumerate() {
                if cap2.is_none_or(|c2| d2 <= c2) {
                    cands.offer(d2, i as u32);
                }
            }
            cands.into_result()
        }
    }
}
