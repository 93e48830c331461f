//! Point-based expression field.
//!
//! Every query position aggregates the features of its K nearest neural
//! points: each neighbor's learnable feature vector is concatenated with a
//! frequency encoding of the relative offset, mapped through two fully
//! connected layers, and the per-neighbor outputs are combined with
//! normalized inverse-distance weights. Neighbor search is global over the
//! whole cloud by default; the optional radius cap reproduces local-only
//! sampling, where a query with no neighbor in range yields the zero vector
//! and a flag.
//!
//! Expression changes reach this field only through the deformed point
//! positions, which is what makes it a dynamic expression field.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{matmul_bias, softplus};
use crate::knn::{KnnResult, SpatialIndex};
use crate::tape::{encode_row, ActKind, BufId, Tape};

/// Distance floor for the inverse-distance weights.
pub const WEIGHT_EPS: f64 = 1e-8;

/// Field configuration. The defaults (K = 8 neighbors, 6 frequency bands,
/// 32 feature channels) give a 39-dim relative position code and a 71-dim
/// layer input.
#[derive(Debug, Clone)]
pub struct ExprFieldConfig {
    pub k: usize,
    pub bands: usize,
    pub channels: usize,
    pub hidden: usize,
    pub local_radius_cap: Option<f64>,
}

impl Default for ExprFieldConfig {
    fn default() -> Self {
        ExprFieldConfig {
            k: 8,
            bands: 6,
            channels: 32,
            hidden: 32,
            local_radius_cap: None,
        }
    }
}

impl ExprFieldConfig {
    /// Relative-position code length: 3 + 2·3·bands (39 at 6 bands).
    pub fn encoded_dim(&self) -> usize {
        3 + 6 * self.bands
    }

    /// Per-neighbor layer input width (71 with the defaults).
    pub fn input_dim(&self) -> usize {
        self.channels + self.encoded_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::contract("ExprFieldConfig", "K must be at least 1"));
        }
        if let Some(cap) = self.local_radius_cap {
            if cap <= 0.0 {
                return Err(Error::contract("ExprFieldConfig", "radius cap must be positive"));
            }
        }
        Ok(())
    }
}

/// Borrowed views of the two per-neighbor layers.
#[derive(Debug, Clone, Copy)]
pub struct ExprFieldLayers<'a> {
    pub w1: &'a [f64], // [input_dim, hidden]
    pub b1: &'a [f64],
    pub w2: &'a [f64], // [hidden, channels]
    pub b2: &'a [f64],
}

/// Frequency positional encoding of a relative offset (length 3 + 6·bands).
pub fn frequency_encode(v: [f64; 3], bands: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 + 6 * bands];
    encode_row(&v, bands, &mut out);
    out
}

/// Inverse-distance weights `w_i = 1 / max(d_i, eps)` normalized to sum 1.
/// Empty input yields an empty vector.
pub fn normalized_weights(distances: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = distances.iter().map(|&d| 1.0 / d.max(WEIGHT_EPS)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// One field sample. Returns the aggregated feature vector and whether the
/// neighbor set was empty (radius-capped miss), in which case the features
/// are exactly zero.
pub fn sample_one(
    x: [f64; 3],
    index: &dyn SpatialIndex,
    table: &[f64],
    layers: ExprFieldLayers<'_>,
    cfg: &ExprFieldConfig,
) -> Result<(Vec<f64>, bool)> {
    cfg.validate()?;
    index.validate_k(cfg.k)?;
    let neighbors = index.query_capped(x, cfg.k, cfg.local_radius_cap, None);
    Ok(aggregate(x, &neighbors, index.positions(), table, layers, cfg))
}

/// Aggregate an explicit neighbor set. Neighbors are first put into the
/// canonical (distance, index) order, so any permutation of the same set
/// produces bit-identical output.
pub fn aggregate(
    x: [f64; 3],
    neighbors: &KnnResult,
    positions: &[f64],
    table: &[f64],
    layers: ExprFieldLayers<'_>,
    cfg: &ExprFieldConfig,
) -> (Vec<f64>, bool) {
    let c = cfg.channels;
    if neighbors.is_empty() {
        return (vec![0.0; c], true);
    }
    let mut order: Vec<usize> = (0..neighbors.len()).collect();
    order.sort_by(|&a, &b| {
        neighbors.distances[a]
            .total_cmp(&neighbors.distances[b])
            .then(neighbors.indices[a].cmp(&neighbors.indices[b]))
    });
    let distances: Vec<f64> = order.iter().map(|&i| neighbors.distances[i]).collect();
    let weights = normalized_weights(&distances);
    let din = cfg.input_dim();
    let mut input = vec![0.0; din];
    let mut hidden = vec![0.0; cfg.hidden];
    let mut mapped = vec![0.0; c];
    let mut out = vec![0.0; c];
    for (rank, &ni) in order.iter().enumerate() {
        let pid = neighbors.indices[ni] as usize;
        let p = &positions[pid * 3..pid * 3 + 3];
        input[..c].copy_from_slice(&table[pid * c..(pid + 1) * c]);
        encode_row(&[p[0] - x[0], p[1] - x[1], p[2] - x[2]], cfg.bands, &mut input[c..]);
        // same kernels as the batched tape path, so both agree bitwise
        matmul_bias(&input, layers.w1, Some(layers.b1), &mut hidden, 1, din, cfg.hidden);
        for h in hidden.iter_mut() {
            *h = softplus(*h);
        }
        matmul_bias(&hidden, layers.w2, Some(layers.b2), &mut mapped, 1, cfg.hidden, c);
        crate::kernels::axpy(weights[rank], &mapped, &mut out);
    }
    (out, false)
}

/// Flattened per-sample neighbor data for a batched field evaluation:
/// CSR offsets over samples, neighbor ids, normalized weights, and relative
/// offsets, all in the canonical (distance, index) order per sample.
#[derive(Debug, Clone)]
pub struct NeighborBatch {
    pub offsets: Arc<Vec<u32>>,
    pub indices: Arc<Vec<u32>>,
    pub weights: Arc<Vec<f64>>,
    pub rel: Arc<Vec<f64>>,
    /// Samples whose neighbor set was empty under the radius cap.
    pub empty_samples: usize,
}

impl NeighborBatch {
    /// Run the KNN batch for `xs` (S×3) and flatten the results.
    pub fn gather(xs: &[f64], index: &dyn SpatialIndex, cfg: &ExprFieldConfig) -> Result<NeighborBatch> {
        cfg.validate()?;
        let results = index.query_batch(xs, cfg.k, cfg.local_radius_cap)?;
        Ok(Self::from_results(xs, &results, index.positions()))
    }

    pub fn from_results(xs: &[f64], results: &[KnnResult], positions: &[f64]) -> NeighborBatch {
        let total: usize = results.iter().map(|r| r.len()).sum();
        let mut offsets = Vec::with_capacity(results.len() + 1);
        let mut indices = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        let mut rel = Vec::with_capacity(total * 3);
        let mut empty_samples = 0usize;
        offsets.push(0u32);
        for (s, r) in results.iter().enumerate() {
            if r.is_empty() {
                empty_samples += 1;
            }
            let w = normalized_weights(&r.distances);
            let x = &xs[s * 3..s * 3 + 3];
            for (i, &pid) in r.indices.iter().enumerate() {
                indices.push(pid);
                weights.push(w[i]);
                let p = &positions[pid as usize * 3..pid as usize * 3 + 3];
                rel.extend_from_slice(&[p[0] - x[0], p[1] - x[1], p[2] - x[2]]);
            }
            offsets.push(indices.len() as u32);
        }
        NeighborBatch {
            offsets: Arc::new(offsets),
            indices: Arc::new(indices),
            weights: Arc::new(weights),
            rel: Arc::new(rel),
            empty_samples,
        }
    }

    pub fn samples(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Tape construction of the batched field: gather rows, encode offsets, two
/// linear layers with a softplus between, then the weighted per-sample pool.
/// Output is `[S, channels]`.
pub fn features_on_tape(
    tape: &mut Tape,
    table: BufId,
    w1: BufId,
    b1: BufId,
    w2: BufId,
    b2: BufId,
    batch: &NeighborBatch,
    cfg: &ExprFieldConfig,
) -> Result<BufId> {
    let gathered = tape.gather_rows(table, batch.indices.clone())?;
    let encoded = tape.freq_encode(batch.rel.clone(), cfg.bands)?;
    let input = tape.concat_cols(&[gathered, encoded])?;
    let h = tape.linear(input, w1, Some(b1))?;
    let h = tape.activation(h, ActKind::Softplus)?;
    let mapped = tape.linear(h, w2, Some(b2))?;
    tape.pool_weighted(mapped, batch.weights.clone(), batch.offsets.clone())
}
