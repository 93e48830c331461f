//! Attention fusion of source tri-planes.
//!
//! A learnable query tri-plane attends over N source tri-planes texel by
//! texel: scores are scaled dot products between projected query and key
//! features, weights are a softmax over sources, and the fused texel is the
//! weighted combination of the source texels. One source passes through
//! exactly; permuting sources leaves the result bit-identical (summation
//! follows a canonical score order).
//!
//! The softmax replaces a bare `w_i / Σ w_j` normalization, which is
//! ill-posed when raw dot products are negative or nearly cancel; the scaled
//! softmax keeps the same normalized-weights-times-sources structure while
//! guaranteeing positive weights.

use crate::error::{Error, Result};
use crate::params::view2d;
use crate::tape::{BufId, Tape};
use crate::tensor::Tensor;
use crate::triplane::{SourceBank, TriPlanes};

/// Learnable fusion parameters: query tri-planes plus the two projections.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: TriPlanes,
    pub lq_w: Tensor, // [C, C]
    pub lq_b: Tensor, // [C]
    pub lk_w: Tensor, // [C, C]
    pub lk_b: Tensor, // [C]
}

impl AttentionParams {
    pub fn validate(&self) -> Result<()> {
        self.query.validate()?;
        let c = self.query.channels();
        for (name, t, want) in [
            ("lq_w", &self.lq_w, vec![c, c]),
            ("lq_b", &self.lq_b, vec![c]),
            ("lk_w", &self.lk_w, vec![c, c]),
            ("lk_b", &self.lk_b, vec![c]),
        ] {
            if t.shape() != want.as_slice() {
                return Err(Error::dim("AttentionParams", format!("{name} {want:?}"), format!("{:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Record the fusion on a tape. `query` is the `[3·R·R, C]` query-plane
/// node; `sources` are the source-plane nodes of identical shape. Returns
/// the fused `[3·R·R, C]` node.
pub fn fuse_on_tape(
    tape: &mut Tape,
    query: BufId,
    lq_w: BufId,
    lq_b: BufId,
    lk_w: BufId,
    lk_b: BufId,
    sources: &[BufId],
) -> Result<BufId> {
    if sources.is_empty() {
        return Err(Error::contract("fuse_on_tape", "no sources"));
    }
    let q_proj = tape.linear(query, lq_w, Some(lq_b))?;
    let keys: Vec<BufId> = sources
        .iter()
        .map(|&s| tape.linear(s, lk_w, Some(lk_b)))
        .collect::<Result<_>>()?;
    tape.attention_mix(q_proj, &keys, sources)
}

/// Fuse a bank of source planes into one tri-plane set (forward only).
/// Runs the identical ops as the tape path, so results agree bitwise.
pub fn fuse(bank: &SourceBank, params: &AttentionParams) -> Result<TriPlanes> {
    params.validate()?;
    let r = params.query.resolution();
    let c = params.query.channels();
    if bank.slots[0].resolution() != r || bank.slots[0].channels() != c {
        return Err(Error::dim(
            "mta_fuse",
            format!("{r}x{r}x{c} sources"),
            format!("{}x{}x{}", bank.slots[0].resolution(), bank.slots[0].resolution(), bank.slots[0].channels()),
        ));
    }
    let rows = 3 * r * r;
    let mut tape = Tape::new();
    let q = tape.leaf(params.query.planes.values().to_vec(), rows, c)?;
    let (wr, wc) = view2d(params.lq_w.shape());
    let lq_w = tape.leaf(params.lq_w.values().to_vec(), wr, wc)?;
    let lq_b = tape.leaf(params.lq_b.values().to_vec(), 1, c)?;
    let lk_w = tape.leaf(params.lk_w.values().to_vec(), wr, wc)?;
    let lk_b = tape.leaf(params.lk_b.values().to_vec(), 1, c)?;
    let sources: Vec<BufId> = bank
        .slots
        .iter()
        .map(|s| tape.leaf(s.planes.values().to_vec(), rows, c))
        .collect::<Result<_>>()?;
    let fused = fuse_on_tape(&mut tape, q, lq_w, lq_b, lk_w, lk_b, &sources)?;
    Ok(TriPlanes {
        planes: Tensor::new(
            vec![3, r, r, c],
            tape.value(fused).to_vec(),
        )?,
        scene_bound: bank.slots[0].scene_bound,
    })
}

/// Forward fusion that also returns the per-texel weights `[3·R·R, N]`
/// (for the debug CSV dump; weights are in source order).
pub fn fuse_with_weights(bank: &SourceBank, params: &AttentionParams) -> Result<(TriPlanes, Vec<f64>)> {
    let fused = fuse(bank, params)?;
    let r = params.query.resolution();
    let c = params.query.channels();
    let rows = 3 * r * r;
    let n = bank.len();
    let scale = 1.0 / (c as f64).sqrt();

    // project query and keys with the shared kernels
    let mut q_proj = vec![0.0; rows * c];
    crate::kernels::matmul_bias(
        params.query.planes.values(),
        params.lq_w.values(),
        Some(params.lq_b.values()),
        &mut q_proj,
        rows,
        c,
        c,
    );
    let mut keys = Vec::with_capacity(n);
    for s in &bank.slots {
        let mut k = vec![0.0; rows * c];
        crate::kernels::matmul_bias(s.planes.values(), params.lk_w.values(), Some(params.lk_b.values()), &mut k, rows, c, c);
        keys.push(k);
    }
    let mut weights = vec![0.0; rows * n];
    for row in 0..rows {
        let q = &q_proj[row * c..(row + 1) * c];
        let scores: Vec<f64> = (0..n)
            .map(|i| crate::kernels::dot(q, &keys[i][row * c..(row + 1) * c]) * scale)
            .collect();
        let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
        let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for i in 0..n {
            weights[row * n + i] = exps[i] / denom;
        }
    }
    Ok((fused, weights))
}
