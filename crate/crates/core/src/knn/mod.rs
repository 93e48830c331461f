//! Exact K-nearest-neighbor queries over deformed point clouds.
//!
//! Three interchangeable backends share one contract: results equal brute
//! force exactly, ordered by ascending distance with ties broken by ascending
//! point index. The uniform grid is the default (clouds are rebuilt every
//! frame, and its O(P) rebuild is allocation-light); the kd-tree exists as an
//! alternative behind the same interface for benchmarking.
//!
//! Batch queries are data-parallel with per-query outputs that do not depend
//! on thread count or chunking: consecutive-query distance bounds only shrink
//! the searched region, never the result.

mod brute;
mod grid;
mod kdtree;

pub use brute::BruteIndex;
pub use grid::GridIndex;
pub use kdtree::KdTreeIndex;

use crate::error::{Error, Result};
use crate::points::PointCloud;

/// Result of one K-nearest-neighbor query.
///
/// `indices` and `distances` are sorted by ascending distance, ties broken by
/// ascending point index. With a radius cap the result may hold fewer than K
/// entries; `is_empty()` flags the no-neighbor case.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    pub indices: Vec<u32>,
    pub distances: Vec<f64>,
}

impl KnnResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Common interface over the exact KNN backends.
pub trait SpatialIndex: Sync {
    /// Number of indexed points.
    fn point_count(&self) -> usize;

    /// Indexed point positions (the snapshot taken at build time).
    fn positions(&self) -> &[f64];

    /// Exact K nearest neighbors of `x` over the whole cloud. `radius_cap`
    /// excludes neighbors with distance > cap, possibly returning fewer
    /// than K entries. `hint` is an optional upper bound on the K-th
    /// neighbor distance (used for warm-started batch queries); it must be
    /// valid (at least K points within it) and never changes the result.
    fn query_capped(&self, x: [f64; 3], k: usize, radius_cap: Option<f64>, hint: Option<f64>) -> KnnResult;

    fn query(&self, x: [f64; 3], k: usize) -> Result<KnnResult> {
        self.validate_k(k)?;
        Ok(self.query_capped(x, k, None, None))
    }

    fn validate_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.point_count() {
            return Err(Error::contract(
                "knn_query",
                format!("K = {k} out of range 1..={}", self.point_count()),
            ));
        }
        Ok(())
    }

    /// Per-query results equal to sequential `query`; parallel over fixed
    /// chunks with warm-start bounds chained between consecutive queries.
    fn query_batch(&self, xs: &[f64], k: usize, radius_cap: Option<f64>) -> Result<Vec<KnnResult>> {
        use rayon::prelude::*;
        self.validate_k(k)?;
        if xs.len() % 3 != 0 {
            return Err(Error::dim("knn_query_batch", "N×3 positions", format!("{} values", xs.len())));
        }
        let n = xs.len() / 3;
        let mut results: Vec<KnnResult> = Vec::with_capacity(n);
        const BATCH_CHUNK: usize = 256;
        let chunks: Vec<Vec<KnnResult>> = (0..n.div_ceil(BATCH_CHUNK))
            .into_par_iter()
            .map(|ci| {
                let start = ci * BATCH_CHUNK;
                let end = (start + BATCH_CHUNK).min(n);
                let mut out = Vec::with_capacity(end - start);
                let mut prev: Option<([f64; 3], f64)> = None;
                for qi in start..end {
                    let x = [xs[qi * 3], xs[qi * 3 + 1], xs[qi * 3 + 2]];
                    // A full previous result bounds the K-th distance here by
                    // the triangle inequality. Inflated a hair so rounding of
                    // the bound can never exclude a true neighbor.
                    let hint = prev.map(|(px, pd)| (pd + dist(px, x)) * (1.0 + 1e-12));
                    let r = self.query_capped(x, k, radius_cap, hint);
                    prev = if r.len() == k {
                        Some((x, *r.distances.last().unwrap()))
                    } else {
                        None
                    };
                    out.push(r);
                }
                out
            })
            .collect();
        for c in chunks {
            results.extend(c);
        }
        Ok(results)
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    dist2(a, b).sqrt()
}

/// Squared Euclidean distance; the single shared formula keeps every backend
/// bitwise comparable.
#[inline]
pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Bounded candidate list ordered by (distance², index).
#[derive(Debug)]
pub(crate) struct Candidates {
    k: usize,
    entries: Vec<(f64, u32)>,
}

impl Candidates {
    pub fn new(k: usize) -> Self {
        Candidates { k, entries: Vec::with_capacity(k + 1) }
    }

    #[inline]
    pub fn worst(&self) -> Option<f64> {
        if self.entries.len() == self.k {
            self.entries.last().map(|e| e.0)
        } else {
            None
        }
    }

    #[inline]
    pub fn offer(&mut self, d2: f64, idx: u32) {
        let len = self.entries.len();
        if len == self.k {
            let last = self.entries[len - 1];
            if (d2, idx) >= (last.0, last.1) {
                return;
            }
        } else {
            self.entries.push((d2, idx));
        }
        // insertion by backward shift into the sorted list
        let s = self.entries.as_mut_slice();
        let mut pos = s.len() - 1;
        while pos > 0 {
            let prev = s[pos - 1];
            if (prev.0, prev.1) > (d2, idx) {
                s[pos] = prev;
                pos -= 1;
            } else {
                break;
            }
        }
        s[pos] = (d2, idx);
    }

    pub fn into_result(self) -> KnnResult {
        let mut indices = Vec::with_capacity(self.entries.len());
        let mut distances = Vec::with_capacity(self.entries.len());
        for (d2, i) in self.entries {
            indices.push(i);
            distances.push(d2.sqrt());
        }
        KnnResult { indices, distances }
    }
}

/// Build the default index (uniform grid) over a cloud.
pub fn build_index(cloud: &PointCloud, scene_bound: f64) -> Result<GridIndex> {
    GridIndex::build(cloud, scene_bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::points::PointCloud;
    use rand::Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = crate::rng::stream(seed, "knn-cloud");
        PointCloud {
            positions: (0..n * 3).map(|_| rng.random_range(-0.5..0.5)).collect(),
        }
    }

    fn shell_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = crate::rng::stream(seed, "knn-shell");
        let mut positions = Vec::with_capacity(n * 3);
        for _ in 0..n {
            let v = [
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
            ];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
            positions.extend(v.iter().map(|c| 0.35 * c / norm));
        }
        PointCloud { positions }
    }

    #[test]
    fn single_point_cloud_always_returns_it() {
        let cloud = PointCloud { positions: vec![0.1, 0.2, 0.3] };
        let idx = build_index(&cloud, 0.5).unwrap();
        let r = idx.query([0.4, -0.4, 0.0], 1).unwrap();
        assert_eq!(r.indices, vec![0]);
    }

    #[test]
    fn empty_cloud_rejected() {
        let cloud = PointCloud { positions: vec![] };
        assert!(build_index(&cloud, 0.5).is_err());
    }

    #[test]
    fn k_larger_than_cloud_rejected() {
        let cloud = random_cloud(5, 0);
        let idx = build_index(&cloud, 0.5).unwrap();
        assert!(idx.query([0.0; 3], 6).is_err());
        assert!(idx.query([0.0; 3], 0).is_err());
    }

    #[test]
    fn hand_picked_example() {
        let cloud = PointCloud {
            positions: vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0],
        };
        let idx = BruteIndex::build(&cloud).unwrap();
        let r = idx.query([0.1, 0.0, 0.0], 2).unwrap();
        assert_eq!(r.indices, vec![0, 1]);
    }

    #[test]
    fn query_on_a_point_returns_it_first_with_zero_distance() {
        let cloud = random_cloud(100, 1);
        let idx = build_index(&cloud, 0.5).unwrap();
        let j = 37;
        let r = idx.query(cloud.point(j), 3).unwrap();
        assert_eq!(r.indices[0], j as u32);
        assert_eq!(r.distances[0], 0.0);
    }

    #[test]
    fn rebuild_on_unchanged_cloud_is_identical() {
        let cloud = random_cloud(500, 2);
        let a = build_index(&cloud, 0.5).unwrap();
        let b = build_index(&cloud, 0.5).unwrap();
        for qi in 0..50 {
            let q = cloud.point(qi * 7 % 500);
            assert_eq!(a.query(q, 8).unwrap(), b.query(q, 8).unwrap());
        }
    }

    #[test]
    fn grid_and_kdtree_match_brute_force_on_random_queries() {
        let cloud = random_cloud(1203, 3);
        let grid = build_index(&cloud, 0.5).unwrap();
        let kd = KdTreeIndex::build(&cloud).unwrap();
        let brute = BruteIndex::build(&cloud).unwrap();
        let mut rng = crate::rng::stream(4, "knn-queries");
        for _ in 0..500 {
            let q = [
                rng.random_range(-0.7..0.7),
                rng.random_range(-0.7..0.7),
                rng.random_range(-0.7..0.7),
            ];
            for k in [1, 4, 8] {
                let want = brute.query(q, k).unwrap();
                assert_eq!(grid.query(q, k).unwrap(), want, "grid mismatch at {q:?} k={k}");
                assert_eq!(kd.query(q, k).unwrap(), want, "kdtree mismatch at {q:?} k={k}");
            }
        }
    }

    #[test]
    fn batch_of_one_equals_single_query() {
        let cloud = random_cloud(300, 5);
        let idx = build_index(&cloud, 0.5).unwrap();
        let q = [0.21, -0.33, 0.05];
        let single = idx.query(q, 8).unwrap();
        let batch = idx.query_batch(&q, 8, None).unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch[0], single);
    }

    #[test]
    fn batch_equals_sequential_and_is_thread_independent() {
        let cloud = shell_cloud(642, 6);
        let idx = build_index(&cloud, 0.5).unwrap();
        let mut rng = crate::rng::stream(7, "batch-queries");
        let xs: Vec<f64> = (0..900).map(|_| rng.random_range(-0.5..0.5)).collect();
        let batch = idx.query_batch(&xs, 8, None).unwrap();
        for (qi, want) in batch.iter().enumerate() {
            let q = [xs[qi * 3], xs[qi * 3 + 1], xs[qi * 3 + 2]];
            assert_eq!(&idx.query(q, 8).unwrap(), want, "query {qi}");
        }
        // one-thread pool gives bitwise identical results
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| idx.query_batch(&xs, 8, None).unwrap());
        assert_eq!(batch, serial);
    }

    #[test]
    fn distances_are_sorted_and_ties_break_by_index() {
        // two points equidistant from the query
        let cloud = PointCloud {
            positions: vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 3.0, 0.0],
        };
        for idx in [&BruteIndex::build(&cloud).unwrap() as &dyn SpatialIndex] {
            let r = idx.query([0.0; 3], 2).unwrap();
            assert_eq!(r.indices, vec![0, 1]);
            assert!(r.distances[0] <= r.distances[1]);
        }
        let grid = build_index(&cloud, 1.5).unwrap();
        let r = grid.query([0.0; 3], 2).unwrap();
        assert_eq!(r.indices, vec![0, 1]);
    }

    #[test]
    fn radius_cap_excludes_far_neighbors_and_flags_empty() {
        let cloud = shell_cloud(642, 8);
        let idx = build_index(&cloud, 0.5).unwrap();
        let cap = 1.0 / 128.0;
        // center of the sphere: far from every surface point
        let r = idx.query_capped([0.0; 3], 8, Some(cap), None);
        assert!(r.is_empty());
        // query on a point: at least itself within the cap
        let r = idx.query_capped(cloud.point(0), 8, Some(cap), None);
        assert!(!r.is_empty());
        assert!(r.distances.iter().all(|&d| d <= cap));
        // capped results agree with capped brute force
        let brute = BruteIndex::build(&cloud).unwrap();
        let mut rng = crate::rng::stream(9, "cap-queries");
        for _ in 0..300 {
            let q = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            assert_eq!(
                idx.query_capped(q, 8, Some(cap), None),
                brute.query_capped(q, 8, Some(cap), None)
            );
        }
    }

    #[test]
    fn off_surface_samples_return_empty_under_cap() {
        // toy-scale shell: samples farther than the cap from the shell
        // surface nearly always see no neighbor
        let cloud = shell_cloud(642, 10);
        let idx = build_index(&cloud, 0.5).unwrap();
        let cap = 1.0 / 128.0;
        let mut rng = crate::rng::stream(11, "offsurface");
        let mut off_surface = 0usize;
        let mut empty = 0usize;
        for _ in 0..5000 {
            let q = [
                rng.random_range(-0.5..0.5f64),
                rng.random_range(-0.5..0.5f64),
                rng.random_range(-0.5..0.5f64),
            ];
            let radial = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
            if (radial - 0.35).abs() > 0.05 {
                off_surface += 1;
                if idx.query_capped(q, 8, Some(cap), None).is_empty() {
                    empty += 1;
                }
            }
        }
        assert!(off_surface > 1000);
        let frac = empty as f64 / off_surface as f64;
        assert!(frac >= 0.99, "only {frac} of off-surface samples were empty");
    }

    #[test]
    fn monotone_distances_property() {
        let cloud = random_cloud(642, 12);
        let idx = build_index(&cloud, 0.5).unwrap();
        let mut rng = crate::rng::stream(13, "monotone");
        for _ in 0..200 {
            let q = [
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            ];
            let r = idx.query(q, 8).unwrap();
            for w in r.distances.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }
}
