//! kd-tree backend: median split on the widest axis, exact search.
//!
//! Kept behind the shared `SpatialIndex` interface as the comparison
//! structure for the KNN benchmark; per-frame rebuild cost is higher than the
//! grid's counting sort but queries in sparse regions descend in O(log P).

use super::{dist2, Candidates, KnnResult, SpatialIndex};
use crate::error::{Error, Result};
use crate::points::PointCloud;

const LEAF_SIZE: usize = 16;

#[derive(Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug)]
pub struct KdTreeIndex {
    positions: Vec<f64>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

impl KdTreeIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::contract("build_index", "empty point cloud"));
        }
        crate::tensor::check_finite_slice("build_index", &cloud.positions)?;
        let p = cloud.len();
        let mut tree = KdTreeIndex {
            positions: cloud.positions.clone(),
            ids: (0..p as u32).collect(),
            nodes: Vec::new(),
            root: 0,
        };
        tree.root = tree.build_node(0, p);
        Ok(tree)
    }

    fn coord(&self, id: u32, axis: usize) -> f64 {
        self.positions[id as usize * 3 + axis]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        // widest axis of the bounding box of this range
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &id in &self.ids[start..end] {
            for a in 0..3 {
                let v = self.coord(id, a);
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
        let mid = (start + end) / 2;
        let positions = &self.positions;
        self.ids[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            positions[a as usize * 3 + axis]
                .total_cmp(&positions[b as usize * 3 + axis])
                .then(a.cmp(&b))
        });
        let value = self.coord(self.ids[mid], axis);
        let node = self.nodes.len();
        self.nodes.push(Node::Leaf { start: 0, end: 0 }); // placeholder
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[node] = Node::Split { axis, value, left, right };
        node
    }

    fn search(&self, node: usize, x: [f64; 3], cap2: Option<f64>, hint2: Option<f64>, cands: &mut Candidates) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &pid in &self.ids[*start..*end] {
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
            Node::Split { axis, value, left, right } => {
                let delta = x[*axis] - value;
                let (near, far) = if delta < 0.0 { (*left, *right) } else { (*right, *left) };
                self.search(near, x, cap2, hint2, cands);
                let plane_d2 = delta * delta;
                let visit_far = {
                    let within_cap = cap2.is_none_or(|c2| plane_d2 <= c2);
                    let within_hint = hint2.is_none_or(|h2| plane_d2 <= h2);
                    let beats = match cands.worst() {
                        Some(w) => plane_d2 <= w,
                        None => true,
                    };
                    within_cap && within_hint && beats
                };
                if visit_far {
                    self.search(far, x, cap2, hint2, cands);
                }
            }
        }
    }
}

impl SpatialIndex for KdTreeIndex {
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
        self.search(self.root, x, cap2, hint2, &mut cands);
        cands.into_result()
    }
}
