//! Reverse-mode differentiation tape.
//!
//! Operations are recorded and executed eagerly on flat `f64` buffers with
//! 2-D `(rows, cols)` views. `backward` replays the record in reverse, which
//! visits each node exactly once in reverse topological order. Gradient
//! accumulation orders are fixed (see `kernels`), so forward values and
//! gradients are bit-identical across runs and thread counts.
//!
//! Every op output is finite-checked; a NaN or infinity anywhere aborts with
//! an error naming the op.
//!
//! `subgraph` runs a builder closure on a child tape, frees the child's
//! intermediate values, and records a single op on the parent. During
//! backward the child is re-executed to rebuild its intermediates before its
//! own backward pass runs. This caps memory for large batched renders without
//! changing any result bit.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{
    axpy, bias_grad, dot, matmul_bias, matmul_dw, matmul_dx, relu, sigmoid, softplus, sum_all,
};
use crate::tensor::check_finite_slice;

/// Recycled buffer storage. Tape buffers at render scale are tens of
/// megabytes; returning them to a pool instead of the allocator avoids
/// first-touch page faults on every op of every step.
mod pool {
    use std::sync::Mutex;

    static POOL: Mutex<Vec<Vec<f64>>> = Mutex::new(Vec::new());
    /// Only buffers at least this large are pooled.
    const MIN_LEN: usize = 1 << 15;
    const MAX_HELD: usize = 96;

    /// A zeroed buffer of `len`, reusing pooled capacity when possible.
    pub fn take(len: usize) -> Vec<f64> {
        if len >= MIN_LEN {
            let reuse = {
                let mut pool = POOL.lock().unwrap();
                pool.iter()
                    .position(|v| v.capacity() >= len && v.capacity() <= 2 * len)
                    .map(|i| pool.swap_remove(i))
            };
            if let Some(mut v) = reuse {
                v.clear();
                v.resize(len, 0.0);
                return v;
            }
        }
        vec![0.0; len]
    }

    /// Copy of a slice backed by pooled capacity.
    pub fn take_copy(src: &[f64]) -> Vec<f64> {
        let mut v = take(src.len());
        v.copy_from_slice(src);
        v
    }

    pub fn give(v: Vec<f64>) {
        if v.capacity() >= MIN_LEN {
            let mut pool = POOL.lock().unwrap();
            if pool.len() < MAX_HELD {
                pool.push(v);
            }
        }
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(u32);

impl BufId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Softplus,
    Sigmoid,
    Relu,
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    /// True for leaves created by `leaf`/`leaf_param` (kept across subgraph
    /// value clearing), false for op outputs.
    is_leaf: bool,
}

impl Node {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug)]
enum Op {
    Linear {
        x: BufId,
        w: BufId,
        b: Option<BufId>,
        out: BufId,
    },
    Act {
        kind: ActKind,
        x: BufId,
        out: BufId,
        /// derivative cached by the forward pass (softplus only)
        cache: Vec<f64>,
    },
    Add {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    Sub {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    Mul {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    Scale {
        x: BufId,
        c: f64,
        out: BufId,
    },
    Abs {
        x: BufId,
        out: BufId,
    },
    Sqrt {
        x: BufId,
        out: BufId,
    },
    SumAll {
        x: BufId,
        out: BufId,
    },
    MeanAll {
        x: BufId,
        out: BufId,
    },
    ConcatCols {
        parts: Vec<BufId>,
        out: BufId,
    },
    SliceCols {
        x: BufId,
        from: usize,
        to: usize,
        out: BufId,
    },
    StackRows {
        parts: Vec<BufId>,
        out: BufId,
    },
    GatherRows {
        table: BufId,
        idx: Arc<Vec<u32>>,
        out: BufId,
    },
    PoolWeighted {
        x: BufId,
        weights: Arc<Vec<f64>>,
        offsets: Arc<Vec<u32>>,
        out: BufId,
    },
    FreqEncode {
        rel: Arc<Vec<f64>>,
        bands: usize,
        out: BufId,
    },
    BilinearPlanes {
        planes: BufId,
        coords: Arc<Vec<f64>>,
        resolution: usize,
        bound: f64,
        out: BufId,
    },
    AttentionMix {
        q_proj: BufId,
        key_projs: Vec<BufId>,
        sources: Vec<BufId>,
        out: BufId,
    },
    Composite {
        density: BufId,
        feats: BufId,
        background: BufId,
        deltas: Arc<Vec<f64>>,
        offsets: Arc<Vec<u32>>,
        out: BufId,
    },
    DepthToSpace {
        x: BufId,
        h: usize,
        w: usize,
        s: usize,
        out: BufId,
    },
    AvgPool2 {
        x: BufId,
        h: usize,
        w: usize,
        out: BufId,
    },
    Subgraph {
        child: Box<Tape>,
        inputs: Vec<BufId>,
        child_inputs: Vec<BufId>,
        child_outputs: Vec<BufId>,
        outputs: Vec<BufId>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Linear { .. } => "linear",
            Op::Act { kind: ActKind::Softplus, .. } => "softplus",
            Op::Act { kind: ActKind::Sigmoid, .. } => "sigmoid",
            Op::Act { kind: ActKind::Relu, .. } => "relu",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Abs { .. } => "abs",
            Op::Sqrt { .. } => "sqrt",
            Op::SumAll { .. } => "sum",
            Op::MeanAll { .. } => "mean",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::StackRows { .. } => "stack_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::PoolWeighted { .. } => "pool_weighted",
            Op::FreqEncode { .. } => "freq_encode",
            Op::BilinearPlanes { .. } => "bilinear_planes",
            Op::AttentionMix { .. } => "attention_mix",
            Op::Composite { .. } => "composite",
            Op::DepthToSpace { .. } => "depth_to_space",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::Subgraph { .. } => "subgraph",
        }
    }

    fn out_ids(&self) -> Vec<BufId> {
        match self {
            Op::Linear { out, .. }
            | Op::Act { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::Abs { out, .. }
            | Op::Sqrt { out, .. }
            | Op::SumAll { out, .. }
            | Op::MeanAll { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::SliceCols { out, .. }
            | Op::StackRows { out, .. }
            | Op::GatherRows { out, .. }
            | Op::PoolWeighted { out, .. }
            | Op::FreqEncode { out, .. }
            | Op::BilinearPlanes { out, .. }
            | Op::AttentionMix { out, .. }
            | Op::Composite { out, .. }
            | Op::DepthToSpace { out, .. }
            | Op::AvgPool2 { out, .. } => vec![*out],
            Op::Subgraph { outputs, .. } => outputs.clone(),
        }
    }
}

/// The differentiation tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
}

impl Drop for Tape {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            pool::give(node.values);
            if let Some(g) = node.grad {
                pool::give(g);
            }
        }
        for op in self.ops.drain(..) {
            if let Op::Act { cache, .. } = op {
                pool::give(cache);
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        // Render-scale tapes allocate hundreds of megabytes per step; with
        // glibc's default mmap threshold every large buffer is returned to
        // the kernel on free and page-faulted back in on the next step.
        // Raising the threshold keeps those buffers on the heap for reuse.
        static TUNE_ALLOCATOR: std::sync::Once = std::sync::Once::new();
        TUNE_ALLOCATOR.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        });
        Tape::default()
    }

    // ── node management ──────────────────────────────────────────────

    fn push_node(&mut self, rows: usize, cols: usize, values: Vec<f64>, needs_grad: bool, is_leaf: bool) -> BufId {
        // Op outputs are created with empty values and filled by execution.
        debug_assert!(values.is_empty() || values.len() == rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            values,
            grad: None,
            needs_grad,
            is_leaf,
        });
        BufId((self.nodes.len() - 1) as u32)
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn leaf(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> Result<BufId> {
        self.check_shape("leaf", &values, rows, cols)?;
        check_finite_slice("leaf", &values)?;
        Ok(self.push_node(rows, cols, values, false, true))
    }

    /// Trainable leaf; `backward` accumulates a gradient for it.
    pub fn leaf_param(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> Result<BufId> {
        self.check_shape("leaf_param", &values, rows, cols)?;
        check_finite_slice("leaf_param", &values)?;
        Ok(self.push_node(rows, cols, values, true, true))
    }

    fn check_shape(&self, ctx: &'static str, values: &[f64], rows: usize, cols: usize) -> Result<()> {
        if values.len() != rows * cols {
            return Err(Error::dim(
                ctx,
                format!("{rows}x{cols} = {} values", rows * cols),
                format!("{} values", values.len()),
            ));
        }
        Ok(())
    }

    pub fn rows(&self, id: BufId) -> usize {
        self.nodes[id.idx()].rows
    }

    pub fn cols(&self, id: BufId) -> usize {
        self.nodes[id.idx()].cols
    }

    pub fn value(&self, id: BufId) -> &[f64] {
        &self.nodes[id.idx()].values
    }

    pub fn scalar_value(&self, id: BufId) -> f64 {
        debug_assert_eq!(self.nodes[id.idx()].len(), 1);
        self.nodes[id.idx()].values[0]
    }

    pub fn grad(&self, id: BufId) -> Option<&[f64]> {
        self.nodes[id.idx()].grad.as_deref()
    }

    fn needs_grad(&self, id: BufId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    fn record(&mut self, op: Op) -> Result<()> {
        let mut op = op;
        let outs = op.out_ids();
        if std::env::var_os("AVATAR_TRACE_OPS").is_some() {
            let t = std::time::Instant::now();
            op_execute(&mut op, &mut self.nodes)?;
            let el = t.elapsed().as_secs_f64();
            if el > 0.005 {
                eprintln!("  [fwd] {} ({} rows): {:.0} ms", op.name(), self.nodes[outs[0].idx()].rows, el * 1e3);
            }
        } else {
            op_execute(&mut op, &mut self.nodes)?;
        }
        for out in outs {
            let node = &self.nodes[out.idx()];
            check_finite_slice(op.name(), &node.values)?;
        }
        self.ops.push(op);
        Ok(())
    }

    fn new_out(&mut self, rows: usize, cols: usize, needs_grad: bool) -> BufId {
        self.push_node(rows, cols, Vec::new(), needs_grad, false)
    }

    // ── op constructors ──────────────────────────────────────────────

    /// y[.., Dout] = x[.., Din] · w[Din, Dout] + b.
    pub fn linear(&mut self, x: BufId, w: BufId, b: Option<BufId>) -> Result<BufId> {
        let (m, din) = (self.rows(x), self.cols(x));
        let (wk, dout) = (self.rows(w), self.cols(w));
        if din != wk {
            return Err(Error::dim("linear", format!("input width {wk}"), format!("{din}")));
        }
        if let Some(b) = b {
            if self.rows(b) * self.cols(b) != dout {
                return Err(Error::dim("linear", format!("bias width {dout}"), format!("{}", self.nodes[b.idx()].len())));
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|b| self.needs_grad(b));
        let out = self.new_out(m, dout, ng);
        self.record(Op::Linear { x, w, b, out })?;
        Ok(out)
    }

    pub fn activation(&mut self, x: BufId, kind: ActKind) -> Result<BufId> {
        let out = self.new_out(self.rows(x), self.cols(x), self.needs_grad(x));
        self.record(Op::Act { kind, x, out, cache: Vec::new() })?;
        Ok(out)
    }

    fn binary(&mut self, a: BufId, b: BufId, ctx: &'static str, make: impl FnOnce(BufId, BufId, BufId) -> Op) -> Result<BufId> {
        if self.rows(a) != self.rows(b) || self.cols(a) != self.cols(b) {
            return Err(Error::dim(
                ctx,
                format!("{}x{}", self.rows(a), self.cols(a)),
                format!("{}x{}", self.rows(b), self.cols(b)),
            ));
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let out = self.new_out(self.rows(a), self.cols(a), ng);
        self.record(make(a, b, out))?;
        Ok(out)
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.binary(a, b, "add", |a, b, out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.binary(a, b, "sub", |a, b, out| Op::Sub { a, b, out })
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.binary(a, b, "mul", |a, b, out| Op::Mul { a, b, out })
    }

    fn unary(&mut self, x: BufId, make: impl FnOnce(BufId, BufId) -> Op) -> Result<BufId> {
        let out = self.new_out(self.rows(x), self.cols(x), self.needs_grad(x));
        self.record(make(x, out))?;
        Ok(out)
    }

    pub fn scale(&mut self, x: BufId, c: f64) -> Result<BufId> {
        self.unary(x, |x, out| Op::Scale { x, c, out })
    }

    pub fn abs(&mut self, x: BufId) -> Result<BufId> {
        self.unary(x, |x, out| Op::Abs { x, out })
    }

    pub fn sqrt(&mut self, x: BufId) -> Result<BufId> {
        self.unary(x, |x, out| Op::Sqrt { x, out })
    }

    pub fn sum_all(&mut self, x: BufId) -> Result<BufId> {
        let ng = self.needs_grad(x);
        let out = self.new_out(1, 1, ng);
        self.record(Op::SumAll { x, out })?;
        Ok(out)
    }

    pub fn mean_all(&mut self, x: BufId) -> Result<BufId> {
        let ng = self.needs_grad(x);
        let out = self.new_out(1, 1, ng);
        self.record(Op::MeanAll { x, out })?;
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[BufId]) -> Result<BufId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols", "no parts"));
        }
        let m = self.rows(parts[0]);
        if parts.iter().any(|&p| self.rows(p) != m) {
            return Err(Error::dim("concat_cols", format!("{m} rows in every part"), "mismatched rows".to_string()));
        }
        let cols: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        let out = self.new_out(m, cols, ng);
        self.record(Op::ConcatCols { parts: parts.to_vec(), out })?;
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: BufId, from: usize, to: usize) -> Result<BufId> {
        if from >= to || to > self.cols(x) {
            return Err(Error::contract("slice_cols", format!("bad range {from}..{to} for {} cols", self.cols(x))));
        }
        let ng = self.needs_grad(x);
        let out = self.new_out(self.rows(x), to - from, ng);
        self.record(Op::SliceCols { x, from, to, out })?;
        Ok(out)
    }

    pub fn stack_rows(&mut self, parts: &[BufId]) -> Result<BufId> {
        if parts.is_empty() {
            return Err(Error::contract("stack_rows", "no parts"));
        }
        let cols = self.cols(parts[0]);
        if parts.iter().any(|&p| self.cols(p) != cols) {
            return Err(Error::dim("stack_rows", format!("{cols} cols in every part"), "mismatched cols".to_string()));
        }
        let rows: usize = parts.iter().map(|&p| self.rows(p)).sum();
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        let out = self.new_out(rows, cols, ng);
        self.record(Op::StackRows { parts: parts.to_vec(), out })?;
        Ok(out)
    }

    pub fn gather_rows(&mut self, table: BufId, idx: Arc<Vec<u32>>) -> Result<BufId> {
        let p = self.rows(table) as u32;
        if idx.iter().any(|&i| i >= p) {
            return Err(Error::contract("gather_rows", format!("index out of range (table has {p} rows)")));
        }
        let ng = self.needs_grad(table);
        let out = self.new_out(idx.len(), self.cols(table), ng);
        self.record(Op::GatherRows { table, idx, out })?;
        Ok(out)
    }

    /// Grouped weighted row sums: `out[g] = Σ_{r in group g} weights[r] · x[r]`,
    /// with groups given as CSR offsets over the rows of `x`. Empty groups
    /// produce zero rows.
    pub fn pool_weighted(&mut self, x: BufId, weights: Arc<Vec<f64>>, offsets: Arc<Vec<u32>>) -> Result<BufId> {
        let m = self.rows(x);
        if weights.len() != m {
            return Err(Error::dim("pool_weighted", format!("{m} weights"), format!("{}", weights.len())));
        }
        if offsets.is_empty() || *offsets.last().unwrap() as usize != m || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::contract("pool_weighted", "offsets must be nondecreasing CSR ending at row count"));
        }
        let groups = offsets.len() - 1;
        let ng = self.needs_grad(x);
        let out = self.new_out(groups, self.cols(x), ng);
        self.record(Op::PoolWeighted { x, weights, offsets, out })?;
        Ok(out)
    }

    /// Frequency positional encoding of constant relative offsets `rel` (S×3):
    /// per row, `[v, (sin(2^l·π·v), cos(2^l·π·v)) for l in 0..bands]`,
    /// sines and cosines interleaved per band, three axes each.
    pub fn freq_encode(&mut self, rel: Arc<Vec<f64>>, bands: usize) -> Result<BufId> {
        if rel.len() % 3 != 0 {
            return Err(Error::dim("freq_encode", "S×3 offsets", format!("{} values", rel.len())));
        }
        let rows = rel.len() / 3;
        let cols = 3 + 6 * bands;
        let out = self.new_out(rows, cols, false);
        self.record(Op::FreqEncode { rel, bands, out })?;
        Ok(out)
    }

    /// Tri-plane bilinear sampling of constant `coords` (S×3, world units):
    /// project onto XY/XZ/YZ, sample each plane with align-corners bilinear
    /// interpolation and border clamp, and sum the three feature vectors.
    /// `planes` is a `[3·R·R, C]` node (plane-major, row-major texels).
    pub fn bilinear_planes(&mut self, planes: BufId, coords: Arc<Vec<f64>>, resolution: usize, bound: f64) -> Result<BufId> {
        if self.rows(planes) != 3 * resolution * resolution {
            return Err(Error::dim(
                "bilinear_planes",
                format!("{} plane rows", 3 * resolution * resolution),
                format!("{}", self.rows(planes)),
            ));
        }
        if coords.len() % 3 != 0 {
            return Err(Error::dim("bilinear_planes", "S×3 coords", format!("{} values", coords.len())));
        }
        if bound <= 0.0 {
            return Err(Error::contract("bilinear_planes", "bound must be positive"));
        }
        let ng = self.needs_grad(planes);
        let out = self.new_out(coords.len() / 3, self.cols(planes), ng);
        self.record(Op::BilinearPlanes { planes, coords, resolution, bound, out })?;
        Ok(out)
    }

    /// Attention-weighted mix of N sources per row: scores are scaled dot
    /// products of the query row against each key row, weights are a softmax
    /// over sources, and the output is the weights-convex combination of the
    /// source rows. Summation follows a canonical order (score descending,
    /// ties broken by source values), so permuting the sources leaves the
    /// output bit-identical; a single source passes through exactly.
    pub fn attention_mix(&mut self, q_proj: BufId, key_projs: &[BufId], sources: &[BufId]) -> Result<BufId> {
        if key_projs.is_empty() || key_projs.len() != sources.len() {
            return Err(Error::contract("attention_mix", "need one key per source and at least one source"));
        }
        let (t, c) = (self.rows(q_proj), self.cols(q_proj));
        for &id in key_projs.iter().chain(sources) {
            if self.rows(id) != t || self.cols(id) != c {
                return Err(Error::dim("attention_mix", format!("{t}x{c}"), format!("{}x{}", self.rows(id), self.cols(id))));
            }
        }
        let ng = self.needs_grad(q_proj)
            || key_projs.iter().any(|&k| self.needs_grad(k))
            || sources.iter().any(|&s| self.needs_grad(s));
        let out = self.new_out(t, c, ng);
        self.record(Op::AttentionMix {
            q_proj,
            key_projs: key_projs.to_vec(),
            sources: sources.to_vec(),
            out,
        })?;
        Ok(out)
    }

    /// Per-ray alpha compositing. `density` is [M,1], `feats` [M,C],
    /// `background` [1,C]; `deltas[k] ≥ 0` are the per-sample path lengths and
    /// `offsets` a CSR over rays. Rays with no samples return the background.
    pub fn composite(&mut self, density: BufId, feats: BufId, background: BufId, deltas: Arc<Vec<f64>>, offsets: Arc<Vec<u32>>) -> Result<BufId> {
        let m = self.rows(density);
        if self.cols(density) != 1 {
            return Err(Error::dim("composite", "density column vector", format!("{} cols", self.cols(density))));
        }
        if self.rows(feats) != m {
            return Err(Error::dim("composite", format!("{m} feature rows"), format!("{}", self.rows(feats))));
        }
        let c = self.cols(feats);
        if self.nodes[background.idx()].len() != c {
            return Err(Error::dim("composite", format!("background width {c}"), format!("{}", self.nodes[background.idx()].len())));
        }
        if deltas.len() != m {
            return Err(Error::dim("composite", format!("{m} deltas"), format!("{}", deltas.len())));
        }
        if deltas.iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::contract("composite", "deltas must be nonnegative (sorted depths)"));
        }
        if offsets.is_empty() || *offsets.last().unwrap() as usize != m || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::contract("composite", "offsets must be nondecreasing CSR ending at sample count"));
        }
        let rays = offsets.len() - 1;
        let ng = self.needs_grad(density) || self.needs_grad(feats) || self.needs_grad(background);
        let out = self.new_out(rays, c, ng);
        self.record(Op::Composite { density, feats, background, deltas, offsets, out })?;
        Ok(out)
    }

    /// Depth-to-space rearrangement: `[H·W, s²·C] → [(sH)·(sW), C]` with each
    /// input pixel's vector laid out as `[s rows × s cols × C]`.
    pub fn depth_to_space(&mut self, x: BufId, h: usize, w: usize, s: usize) -> Result<BufId> {
        if self.rows(x) != h * w {
            return Err(Error::dim("depth_to_space", format!("{} rows", h * w), format!("{}", self.rows(x))));
        }
        if self.cols(x) % (s * s) != 0 {
            return Err(Error::dim("depth_to_space", format!("cols divisible by {}", s * s), format!("{}", self.cols(x))));
        }
        let c = self.cols(x) / (s * s);
        let ng = self.needs_grad(x);
        let out = self.new_out(h * s * w * s, c, ng);
        self.record(Op::DepthToSpace { x, h, w, s, out })?;
        Ok(out)
    }

    /// 2×2 average pooling on an `[H·W, C]` image (H, W even).
    pub fn avg_pool2(&mut self, x: BufId, h: usize, w: usize) -> Result<BufId> {
        if self.rows(x) != h * w || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract("avg_pool2", format!("need even {h}x{w} image matching {} rows", self.rows(x))));
        }
        let ng = self.needs_grad(x);
        let out = self.new_out((h / 2) * (w / 2), self.cols(x), ng);
        self.record(Op::AvgPool2 { x, h, w, out })?;
        Ok(out)
    }

    /// Run `build` on a child tape seeded with copies of `inputs`, then free
    /// the child's intermediate values and bridge its outputs onto this tape.
    /// Backward re-executes the child to rebuild intermediates.
    pub fn subgraph(
        &mut self,
        inputs: &[BufId],
        build: impl FnOnce(&mut Tape, &[BufId]) -> Result<Vec<BufId>>,
    ) -> Result<Vec<BufId>> {
        let mut child = Tape::new();
        let mut child_inputs = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let node = &self.nodes[id.idx()];
            let cid = if node.needs_grad {
                child.leaf_param(node.values.clone(), node.rows, node.cols)?
            } else {
                child.leaf(node.values.clone(), node.rows, node.cols)?
            };
            child_inputs.push(cid);
        }
        let child_outputs = build(&mut child, &child_inputs)?;
        let mut outputs = Vec::with_capacity(child_outputs.len());
        for &cid in &child_outputs {
            let (rows, cols) = (child.rows(cid), child.cols(cid));
            let values = child.value(cid).to_vec();
            let ng = child.needs_grad(cid);
            let out = self.push_node(rows, cols, values, ng, false);
            outputs.push(out);
        }
        child.clear_transient_values();
        self.ops.push(Op::Subgraph {
            child: Box::new(child),
            inputs: inputs.to_vec(),
            child_inputs,
            child_outputs,
            outputs: outputs.clone(),
        });
        Ok(outputs)
    }

    /// Drop values of op outputs and activation caches (leaves keep their
    /// values for replay).
    fn clear_transient_values(&mut self) {
        for node in &mut self.nodes {
            if !node.is_leaf {
                pool::give(std::mem::take(&mut node.values));
            }
            if let Some(g) = node.grad.take() {
                pool::give(g);
            }
        }
        for op in &mut self.ops {
            if let Op::Act { cache, .. } = op {
                pool::give(std::mem::take(cache));
            }
        }
    }

    /// Re-execute all recorded ops (used after `clear_transient_values`).
    fn replay(&mut self) -> Result<()> {
        let mut ops = std::mem::take(&mut self.ops);
        for op in ops.iter_mut() {
            op_execute(op, &mut self.nodes)?;
        }
        self.ops = ops;
        Ok(())
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar root; gradients accumulate into every
    /// `leaf_param` reachable from it.
    pub fn backward(&mut self, root: BufId) -> Result<()> {
        if self.nodes[root.idx()].len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be scalar, got {}x{}", self.rows(root), self.cols(root)),
            ));
        }
        self.nodes[root.idx()].grad = Some(vec![1.0]);
        self.backward_pass()
    }

    fn backward_pass(&mut self) -> Result<()> {
        let trace = std::env::var_os("AVATAR_TRACE_OPS").is_some();
        let mut ops = std::mem::take(&mut self.ops);
        if trace {
            let mut per_op: std::collections::HashMap<&'static str, f64> = std::collections::HashMap::new();
            for op in ops.iter_mut().rev() {
                let t = std::time::Instant::now();
                op_backward(op, &mut self.nodes)?;
                *per_op.entry(op.name()).or_default() += t.elapsed().as_secs_f64();
            }
            let mut rows: Vec<_> = per_op.into_iter().collect();
            rows.sort_by(|a, b| b.1.total_cmp(&a.1));
            for (name, secs) in rows {
                eprintln!("  [bwd] {name}: {:.0} ms", secs * 1e3);
            }
        } else {
            for op in ops.iter_mut().rev() {
                op_backward(op, &mut self.nodes)?;
            }
        }
        self.ops = ops;
        Ok(())
    }
}

// ── shared node helpers ──────────────────────────────────────────────

fn ensure_grad(nodes: &mut [Node], id: BufId) -> &mut Vec<f64> {
    let node = &mut nodes[id.idx()];
    let len = node.rows * node.cols;
    node.grad.get_or_insert_with(|| pool::take(len))
}

fn take_grad(nodes: &mut [Node], id: BufId) -> Option<Vec<f64>> {
    nodes[id.idx()].grad.as_deref().map(pool::take_copy)
}

/// Disjoint access to the values of one node and the gradient of another
/// without cloning the value buffer.
fn value_and_grad_mut(nodes: &mut [Node], value_of: BufId, grad_of: BufId) -> (&[f64], &mut Vec<f64>) {
    let (a, b) = (value_of.idx(), grad_of.idx());
    if a == b {
        let node = &mut nodes[a];
        let len = node.rows * node.cols;
        let Node { values, grad, .. } = node;
        let grad = grad.get_or_insert_with(|| vec![0.0; len]);
        (values.as_slice(), grad)
    } else {
        let (lo_i, hi_i) = (a.min(b), a.max(b));
        let (left, right) = nodes.split_at_mut(hi_i);
        let (lo_node, hi_node) = (&mut left[lo_i], &mut right[0]);
        let (vnode, gnode) = if a < b { (lo_node, hi_node) } else { (hi_node, lo_node) };
        let len = gnode.rows * gnode.cols;
        let grad = gnode.grad.get_or_insert_with(|| vec![0.0; len]);
        (vnode.values.as_slice(), grad)
    }
}

// ── forward execution ────────────────────────────────────────────────

fn op_execute(op: &mut Op, nodes: &mut Vec<Node>) -> Result<()> {
    match op {
        Op::Linear { x, w, b, out } => {
            let (m, k) = (nodes[x.idx()].rows, nodes[x.idx()].cols);
            let n = nodes[w.idx()].cols;
            let mut y = pool::take(m * n);
            {
                let xv = &nodes[x.idx()].values;
                let wv = &nodes[w.idx()].values;
                let bv = b.map(|b| nodes[b.idx()].values.as_slice());
                matmul_bias(xv, wv, bv, &mut y, m, k, n);
            }
            nodes[out.idx()].values = y;
        }
        Op::Act { kind, x, out, cache } => {
            let xv = &nodes[x.idx()].values;
            let mut y = pool::take(xv.len());
            match kind {
                ActKind::Softplus => {
                    // cache the derivative only when it will be consumed
                    if nodes[x.idx()].needs_grad {
                        let mut d = pool::take(xv.len());
                        crate::kernels::softplus_slice(xv, &mut y, Some(&mut d));
                        pool::give(std::mem::replace(cache, d));
                    } else {
                        crate::kernels::softplus_slice(xv, &mut y, None);
                    }
                }
                ActKind::Sigmoid => crate::kernels::sigmoid_slice(xv, &mut y),
                ActKind::Relu => {
                    for (o, &v) in y.iter_mut().zip(xv) {
                        *o = relu(v);
                    }
                }
            }
            nodes[out.idx()].values = y;
        }
        Op::Add { a, b, out } => {
            let (av, bv) = (&nodes[a.idx()].values, &nodes[b.idx()].values);
            let mut y = pool::take(av.len());
            for i in 0..av.len() {
                y[i] = av[i] + bv[i];
            }
            nodes[out.idx()].values = y;
        }
        Op::Sub { a, b, out } => {
            let (av, bv) = (&nodes[a.idx()].values, &nodes[b.idx()].values);
            let mut y = pool::take(av.len());
            for i in 0..av.len() {
                y[i] = av[i] - bv[i];
            }
            nodes[out.idx()].values = y;
        }
        Op::Mul { a, b, out } => {
            let (av, bv) = (&nodes[a.idx()].values, &nodes[b.idx()].values);
            let mut y = pool::take(av.len());
            for i in 0..av.len() {
                y[i] = av[i] * bv[i];
            }
            nodes[out.idx()].values = y;
        }
        Op::Scale { x, c, out } => {
            let c = *c;
            let xv = &nodes[x.idx()].values;
            let mut y = pool::take(xv.len());
            for i in 0..xv.len() {
                y[i] = xv[i] * c;
            }
            nodes[out.idx()].values = y;
        }
        Op::Abs { x, out } => {
            let xv = &nodes[x.idx()].values;
            let mut y = pool::take(xv.len());
            for i in 0..xv.len() {
                y[i] = xv[i].abs();
            }
            nodes[out.idx()].values = y;
        }
        Op::Sqrt { x, out } => {
            if nodes[x.idx()].values.iter().any(|&v| v < 0.0) {
                return Err(Error::contract("sqrt", "negative input"));
            }
            let xv = &nodes[x.idx()].values;
            let mut y = pool::take(xv.len());
            for i in 0..xv.len() {
                y[i] = xv[i].sqrt();
            }
            nodes[out.idx()].values = y;
        }
        Op::SumAll { x, out } => {
            nodes[out.idx()].values = vec![sum_all(&nodes[x.idx()].values)];
        }
        Op::MeanAll { x, out } => {
            let n = nodes[x.idx()].values.len() as f64;
            nodes[out.idx()].values = vec![sum_all(&nodes[x.idx()].values) / n];
        }
        Op::ConcatCols { parts, out } => {
            let m = nodes[parts[0].idx()].rows;
            let cols = nodes[out.idx()].cols;
            let mut y = pool::take(m * cols);
            let widths: Vec<usize> = parts.iter().map(|p| nodes[p.idx()].cols).collect();
            let views: Vec<&[f64]> = parts.iter().map(|p| nodes[p.idx()].values.as_slice()).collect();
            y.par_chunks_mut(cols).enumerate().for_each(|(r, yr)| {
                let mut at = 0;
                for (pv, &pc) in views.iter().zip(&widths) {
                    yr[at..at + pc].copy_from_slice(&pv[r * pc..(r + 1) * pc]);
                    at += pc;
                }
            });
            nodes[out.idx()].values = y;
        }
        Op::SliceCols { x, from, to, out } => {
            let (from, to) = (*from, *to);
            let (m, cols) = (nodes[x.idx()].rows, nodes[x.idx()].cols);
            let width = to - from;
            let xv = &nodes[x.idx()].values;
            let mut y = pool::take(m * width);
            y.par_chunks_mut(width).enumerate().for_each(|(r, yr)| {
                yr.copy_from_slice(&xv[r * cols + from..r * cols + to]);
            });
            nodes[out.idx()].values = y;
        }
        Op::StackRows { parts, out } => {
            let mut y = Vec::with_capacity(nodes[out.idx()].len());
            for &p in parts.iter() {
                y.extend_from_slice(&nodes[p.idx()].values);
            }
            nodes[out.idx()].values = y;
        }
        Op::GatherRows { table, idx, out } => {
            let c = nodes[table.idx()].cols;
            let tv = &nodes[table.idx()].values;
            let mut y = pool::take(idx.len() * c);
            for (r, &i) in idx.iter().enumerate() {
                y[r * c..(r + 1) * c].copy_from_slice(&tv[i as usize * c..(i as usize + 1) * c]);
            }
            nodes[out.idx()].values = y;
        }
        Op::PoolWeighted { x, weights, offsets, out } => {
            let c = nodes[x.idx()].cols;
            let xv = &nodes[x.idx()].values;
            let groups = offsets.len() - 1;
            let mut y = pool::take(groups * c);
            y.par_chunks_mut(c).enumerate().for_each(|(g, yr)| {
                for r in offsets[g] as usize..offsets[g + 1] as usize {
                    axpy(weights[r], &xv[r * c..(r + 1) * c], yr);
                }
            });
            nodes[out.idx()].values = y;
        }
        Op::FreqEncode { rel, bands, out } => {
            let bands = *bands;
            let rows = rel.len() / 3;
            let cols = 3 + 6 * bands;
            let mut y = pool::take(rows * cols);
            y.par_chunks_mut(cols).enumerate().for_each(|(r, yr)| {
                encode_row(&rel[r * 3..r * 3 + 3], bands, yr);
            });
            nodes[out.idx()].values = y;
        }
        Op::BilinearPlanes { planes, coords, resolution, bound, out } => {
            let (resolution, bound) = (*resolution, *bound);
            let c = nodes[planes.idx()].cols;
            let pv = &nodes[planes.idx()].values;
            let samples = coords.len() / 3;
            let mut y = pool::take(samples * c);
            y.par_chunks_mut(c).enumerate().for_each(|(s, yr)| {
                let x = &coords[s * 3..s * 3 + 3];
                for plane in 0..3 {
                    let (u, v) = project_plane(x, plane, bound);
                    let taps = bilinear_taps(u, v, resolution);
                    let base = plane * resolution * resolution;
                    for &(texel, wgt) in &taps {
                        axpy(wgt, &pv[(base + texel) * c..(base + texel + 1) * c], yr);
                    }
                }
            });
            nodes[out.idx()].values = y;
        }
        Op::AttentionMix { q_proj, key_projs, sources, out } => {
            let (t, c) = (nodes[q_proj.idx()].rows, nodes[q_proj.idx()].cols);
            let n = sources.len();
            let qv = &nodes[q_proj.idx()].values;
            let kvs: Vec<&[f64]> = key_projs.iter().map(|k| nodes[k.idx()].values.as_slice()).collect();
            let svs: Vec<&[f64]> = sources.iter().map(|s| nodes[s.idx()].values.as_slice()).collect();
            let mut y = vec![0.0; t * c];
            y.par_chunks_mut(c).enumerate().for_each(|(row, yr)| {
                let q = &qv[row * c..(row + 1) * c];
                let mut scores = vec![0.0; n];
                for i in 0..n {
                    scores[i] = dot(q, &kvs[i][row * c..(row + 1) * c]) / (c as f64).sqrt();
                }
                let order = canonical_order(&scores, &svs, row, c);
                let weights = softmax_ordered(&scores, &order);
                let anchor = &svs[order[0]][row * c..(row + 1) * c];
                yr.copy_from_slice(anchor);
                for (rank, &i) in order.iter().enumerate() {
                    let src = &svs[i][row * c..(row + 1) * c];
                    let w = weights[rank];
                    for (j, yj) in yr.iter_mut().enumerate() {
                        *yj += w * (src[j] - anchor[j]);
                    }
                }
            });
            nodes[out.idx()].values = y;
        }
        Op::Composite { density, feats, background, deltas, offsets, out } => {
            let c = nodes[feats.idx()].cols;
            let dv = &nodes[density.idx()].values;
            let fv = &nodes[feats.idx()].values;
            let bg = &nodes[background.idx()].values;
            let rays = offsets.len() - 1;
            let mut y = vec![0.0; rays * c];
            y.par_chunks_mut(c).enumerate().for_each(|(ray, yr)| {
                let mut trans = 1.0f64;
                for k in offsets[ray] as usize..offsets[ray + 1] as usize {
                    let alpha = 1.0 - (-dv[k] * deltas[k]).exp();
                    axpy(trans * alpha, &fv[k * c..(k + 1) * c], yr);
                    trans *= 1.0 - alpha;
                }
                axpy(trans, bg, yr);
            });
            nodes[out.idx()].values = y;
        }
        Op::DepthToSpace { x, h, w, s, out } => {
            let c = nodes[out.idx()].cols;
            let xv = &nodes[x.idx()].values;
            let (h, w, s) = (*h, *w, *s);
            let ow = w * s;
            let mut y = vec![0.0; h * s * ow * c];
            for i in 0..h {
                for j in 0..w {
                    let px = &xv[(i * w + j) * s * s * c..(i * w + j + 1) * s * s * c];
                    for di in 0..s {
                        for dj in 0..s {
                            let dst = ((i * s + di) * ow + (j * s + dj)) * c;
                            let src = (di * s + dj) * c;
                            y[dst..dst + c].copy_from_slice(&px[src..src + c]);
                        }
                    }
                }
            }
            nodes[out.idx()].values = y;
        }
        Op::AvgPool2 { x, h, w, out } => {
            let c = nodes[x.idx()].cols;
            let xv = &nodes[x.idx()].values;
            let (h, w) = (*h, *w);
            let (oh, ow) = (h / 2, w / 2);
            let mut y = vec![0.0; oh * ow * c];
            for i in 0..oh {
                for j in 0..ow {
                    let yr = &mut y[(i * ow + j) * c..(i * ow + j + 1) * c];
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = ((2 * i + di) * w + (2 * j + dj)) * c;
                        axpy(0.25, &xv[src..src + c], yr);
                    }
                }
            }
            nodes[out.idx()].values = y;
        }
        Op::Subgraph { .. } => {
            // Executed when recorded; replay handles re-execution explicitly.
        }
    }
    Ok(())
}

// ── backward execution ───────────────────────────────────────────────

fn op_backward(op: &mut Op, nodes: &mut Vec<Node>) -> Result<()> {
    match op {
        Op::Linear { x, w, b, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            let (m, k) = (nodes[x.idx()].rows, nodes[x.idx()].cols);
            let n = nodes[w.idx()].cols;
            if nodes[x.idx()].needs_grad {
                let (wv, dx) = value_and_grad_mut(nodes, *w, *x);
                matmul_dx(&dy, wv, dx, m, k, n);
            }
            if nodes[w.idx()].needs_grad {
                let (xv, dw) = value_and_grad_mut(nodes, *x, *w);
                matmul_dw(xv, &dy, dw, m, k, n);
            }
            if let Some(b) = b {
                if nodes[b.idx()].needs_grad {
                    let db = ensure_grad(nodes, *b);
                    bias_grad(&dy, db, m, n);
                }
            }
        }
        Op::Act { kind, x, out, cache } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if !nodes[x.idx()].needs_grad {
                return Ok(());
            }
            match kind {
                ActKind::Softplus => {
                    if cache.len() == dy.len() {
                        let dx = ensure_grad(nodes, *x);
                        for i in 0..dy.len() {
                            dx[i] += dy[i] * cache[i];
                        }
                    } else {
                        let (xv, dx) = value_and_grad_mut(nodes, *x, *x);
                        for i in 0..dy.len() {
                            dx[i] += dy[i] * sigmoid(xv[i]);
                        }
                    }
                }
                ActKind::Sigmoid => {
                    let (yv, dx) = value_and_grad_mut(nodes, *out, *x);
                    for i in 0..dy.len() {
                        dx[i] += dy[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
                ActKind::Relu => {
                    let (xv, dx) = value_and_grad_mut(nodes, *x, *x);
                    for i in 0..dy.len() {
                        if xv[i] > 0.0 {
                            dx[i] += dy[i];
                        }
                    }
                }
            }
        }
        Op::Add { a, b, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[a.idx()].needs_grad {
                axpy(1.0, &dy, ensure_grad(nodes, *a));
            }
            if nodes[b.idx()].needs_grad {
                axpy(1.0, &dy, ensure_grad(nodes, *b));
            }
        }
        Op::Sub { a, b, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[a.idx()].needs_grad {
                axpy(1.0, &dy, ensure_grad(nodes, *a));
            }
            if nodes[b.idx()].needs_grad {
                axpy(-1.0, &dy, ensure_grad(nodes, *b));
            }
        }
        Op::Mul { a, b, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[a.idx()].needs_grad {
                let (bv, da) = value_and_grad_mut(nodes, *b, *a);
                for i in 0..da.len() {
                    da[i] += dy[i] * bv[i];
                }
            }
            if nodes[b.idx()].needs_grad {
                let (av, db) = value_and_grad_mut(nodes, *a, *b);
                for i in 0..db.len() {
                    db[i] += dy[i] * av[i];
                }
            }
        }
        Op::Scale { x, c, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[x.idx()].needs_grad {
                axpy(*c, &dy, ensure_grad(nodes, *x));
            }
        }
        Op::Abs { x, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[x.idx()].needs_grad {
                let sign: Vec<f64> = nodes[x.idx()].values.iter().map(|&v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }).collect();
                let dx = ensure_grad(nodes, *x);
                for i in 0..dx.len() {
                    dx[i] += dy[i] * sign[i];
                }
            }
        }
        Op::Sqrt { x, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[x.idx()].needs_grad {
                // d√x = 1/(2√x); defined as 0 at x = 0.
                let yv = nodes[out.idx()].values.clone();
                let dx = ensure_grad(nodes, *x);
                for i in 0..dx.len() {
                    if yv[i] > 0.0 {
                        dx[i] += dy[i] * 0.5 / yv[i];
                    }
                }
            }
        }
        Op::SumAll { x, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[x.idx()].needs_grad {
                let g = dy[0];
                let dx = ensure_grad(nodes, *x);
                for v in dx.iter_mut() {
                    *v += g;
                }
            }
        }
        Op::MeanAll { x, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[x.idx()].needs_grad {
                let n = nodes[x.idx()].len() as f64;
                let g = dy[0] / n;
                let dx = ensure_grad(nodes, *x);
                for v in dx.iter_mut() {
                    *v += g;
                }
            }
        }
        Op::ConcatCols { parts, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            let cols = nodes[out.idx()].cols;
            let mut at = 0;
            for &p in parts.iter() {
                let pc = nodes[p.idx()].cols;
                if nodes[p.idx()].needs_grad {
                    let dp = ensure_grad(nodes, p);
                    dp.par_chunks_mut(pc).enumerate().for_each(|(r, dpr)| {
                        axpy(1.0, &dy[r * cols + at..r * cols + at + pc], dpr);
                    });
                }
                at += pc;
            }
        }
        Op::SliceCols { x, from, to, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[x.idx()].needs_grad {
                let cols = nodes[x.idx()].cols;
                let width = *to - *from;
                let from = *from;
                let dx = ensure_grad(nodes, *x);
                dx.par_chunks_mut(cols).enumerate().for_each(|(r, dxr)| {
                    axpy(1.0, &dy[r * width..(r + 1) * width], &mut dxr[from..from + width]);
                });
            }
        }
        Op::StackRows { parts, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            let cols = nodes[out.idx()].cols;
            let mut at = 0;
            for &p in parts.iter() {
                let rows = nodes[p.idx()].rows;
                if nodes[p.idx()].needs_grad {
                    let dp = ensure_grad(nodes, p);
                    axpy(1.0, &dy[at * cols..(at + rows) * cols], dp);
                }
                at += rows;
            }
        }
        Op::GatherRows { table, idx, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[table.idx()].needs_grad {
                let c = nodes[table.idx()].cols;
                let dt = ensure_grad(nodes, *table);
                // Sequential scatter in row order keeps accumulation deterministic.
                for (r, &i) in idx.iter().enumerate() {
                    axpy(1.0, &dy[r * c..(r + 1) * c], &mut dt[i as usize * c..(i as usize + 1) * c]);
                }
            }
        }
        Op::PoolWeighted { x, weights, offsets, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[x.idx()].needs_grad {
                let c = nodes[x.idx()].cols;
                let dx = ensure_grad(nodes, *x);
                let groups = offsets.len() - 1;
                // Group row ranges are disjoint; parallelism cannot race.
                let mut group_slices: Vec<(usize, &mut [f64])> = Vec::with_capacity(groups);
                let mut rest = dx.as_mut_slice();
                let mut consumed = 0usize;
                for g in 0..groups {
                    let end = offsets[g + 1] as usize;
                    let (head, tail) = rest.split_at_mut((end - consumed) * c);
                    group_slices.push((g, head));
                    rest = tail;
                    consumed = end;
                }
                group_slices.into_par_iter().for_each(|(g, dxg)| {
                    let start = offsets[g] as usize;
                    for (local, dxr) in dxg.chunks_mut(c).enumerate() {
                        let r = start + local;
                        axpy(weights[r], &dy[g * c..(g + 1) * c], dxr);
                    }
                });
            }
        }
        Op::FreqEncode { .. } => {}
        Op::BilinearPlanes { planes, coords, resolution, bound, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[planes.idx()].needs_grad {
                let c = nodes[planes.idx()].cols;
                let r = *resolution;
                let bound = *bound;
                let samples = coords.len() / 3;
                let dp = ensure_grad(nodes, *planes);
                // One thread per plane; within a plane samples scatter in order.
                dp.par_chunks_mut(r * r * c).enumerate().for_each(|(plane, dpp)| {
                    for s in 0..samples {
                        let x = &coords[s * 3..s * 3 + 3];
                        let (u, v) = project_plane(x, plane, bound);
                        for (texel, wgt) in bilinear_taps(u, v, r) {
                            axpy(wgt, &dy[s * c..(s + 1) * c], &mut dpp[texel * c..(texel + 1) * c]);
                        }
                    }
                });
            }
        }
        Op::AttentionMix { q_proj, key_projs, sources, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            attention_mix_backward(nodes, *q_proj, key_projs, sources, &dy)?;
        }
        Op::Composite { density, feats, background, deltas, offsets, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            composite_backward(nodes, *density, *feats, *background, deltas, offsets, &dy);
        }
        Op::DepthToSpace { x, h, w, s, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[x.idx()].needs_grad {
                let c = nodes[out.idx()].cols;
                let (h, w, s) = (*h, *w, *s);
                let ow = w * s;
                let dx = ensure_grad(nodes, *x);
                for i in 0..h {
                    for j in 0..w {
                        let px = &mut dx[(i * w + j) * s * s * c..(i * w + j + 1) * s * s * c];
                        for di in 0..s {
                            for dj in 0..s {
                                let src = ((i * s + di) * ow + (j * s + dj)) * c;
                                axpy(1.0, &dy[src..src + c], &mut px[(di * s + dj) * c..(di * s + dj + 1) * c]);
                            }
                        }
                    }
                }
            }
        }
        Op::AvgPool2 { x, h, w, out } => {
            let Some(dy) = take_grad(nodes, *out) else { return Ok(()) };
            if nodes[x.idx()].needs_grad {
                let c = nodes[x.idx()].cols;
                let (h, w) = (*h, *w);
                let ow = w / 2;
                let dx = ensure_grad(nodes, *x);
                for i in 0..h / 2 {
                    for j in 0..ow {
                        let g = &dy[(i * ow + j) * c..(i * ow + j + 1) * c];
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let dst = ((2 * i + di) * w + (2 * j + dj)) * c;
                            axpy(0.25, g, &mut dx[dst..dst + c]);
                        }
                    }
                }
            }
        }
        Op::Subgraph { child, inputs, child_inputs, child_outputs, outputs } => {
            let any_grad = outputs.iter().any(|o| nodes[o.idx()].grad.is_some());
            if !any_grad {
                return Ok(());
            }
            // Rebuild child values from current parent inputs, replay, seed
            // output grads, run child backward, pull input grads back out.
            for (&cid, &pid) in child_inputs.iter().zip(inputs.iter()) {
                child.nodes[cid.idx()].values = nodes[pid.idx()].values.clone();
            }
            child.replay()?;
            for (&cid, &pid) in child_outputs.iter().zip(outputs.iter()) {
                if let Some(g) = nodes[pid.idx()].grad.clone() {
                    child.nodes[cid.idx()].grad = Some(g);
                }
            }
            child.backward_pass()?;
            for (&cid, &pid) in child_inputs.iter().zip(inputs.iter()) {
                if nodes[pid.idx()].needs_grad {
                    if let Some(g) = child.nodes[cid.idx()].grad.take() {
                        axpy(1.0, &g, ensure_grad(nodes, pid));
                    }
                }
            }
            child.clear_transient_values();
        }
    }
    Ok(())
}

fn attention_mix_backward(
    nodes: &mut [Node],
    q_proj: BufId,
    key_projs: &[BufId],
    sources: &[BufId],
    dy: &[f64],
) -> Result<()> {
    let (t, c) = (nodes[q_proj.idx()].rows, nodes[q_proj.idx()].cols);
    let n = sources.len();
    let scale = 1.0 / (c as f64).sqrt();
    let qv = nodes[q_proj.idx()].values.clone();
    let kvs: Vec<Vec<f64>> = key_projs.iter().map(|k| nodes[k.idx()].values.clone()).collect();
    let svs: Vec<Vec<f64>> = sources.iter().map(|s| nodes[s.idx()].values.clone()).collect();

    // Per-row gradients are independent; compute them all in parallel into
    // dense buffers, then add into the shared node grads.
    let mut dq = vec![0.0; t * c];
    let mut dks = vec![vec![0.0; t * c]; n];
    let mut dss = vec![vec![0.0; t * c]; n];
    {
        let sv_refs: Vec<&[f64]> = svs.iter().map(|v| v.as_slice()).collect();
        // Split the flat buffers into per-row slices for safe parallel writes.
        let mut row_views: Vec<(usize, &mut [f64], Vec<&mut [f64]>, Vec<&mut [f64]>)> = Vec::with_capacity(t);
        {
            let mut dq_rest = dq.as_mut_slice();
            let mut dk_rests: Vec<&mut [f64]> = dks.iter_mut().map(|v| v.as_mut_slice()).collect();
            let mut ds_rests: Vec<&mut [f64]> = dss.iter_mut().map(|v| v.as_mut_slice()).collect();
            for row in 0..t {
                let (dq_row, dq_tail) = std::mem::take(&mut dq_rest).split_at_mut(c);
                dq_rest = dq_tail;
                let mut dk_rows = Vec::with_capacity(n);
                for rest in dk_rests.iter_mut() {
                    let (head, tail) = std::mem::take(rest).split_at_mut(c);
                    dk_rows.push(head);
                    *rest = tail;
                }
                let mut ds_rows = Vec::with_capacity(n);
                for rest in ds_rests.iter_mut() {
                    let (head, tail) = std::mem::take(rest).split_at_mut(c);
                    ds_rows.push(head);
                    *rest = tail;
                }
                row_views.push((row, dq_row, dk_rows, ds_rows));
            }
        }
        row_views.into_par_iter().for_each(|(row, dq_row, mut dk_rows, mut ds_rows)| {
            let q = &qv[row * c..(row + 1) * c];
            let g = &dy[row * c..(row + 1) * c];
            let mut scores = vec![0.0; n];
            for i in 0..n {
                scores[i] = dot(q, &kvs[i][row * c..(row + 1) * c]) * scale;
            }
            let order = canonical_order(&scores, &sv_refs, row, c);
            let weights = softmax_ordered(&scores, &order);
            let anchor_i = order[0];
            let anchor = &svs[anchor_i][row * c..(row + 1) * c];

            // d out / d sources, and per-source score sensitivities.
            let mut a = vec![0.0; n]; // a[rank] = <src_i - anchor, g>
            let mut wsum = 0.0;
            for (rank, &i) in order.iter().enumerate() {
                let src = &svs[i][row * c..(row + 1) * c];
                let mut acc = 0.0;
                for j in 0..c {
                    acc += (src[j] - anchor[j]) * g[j];
                }
                a[rank] = acc;
                wsum += weights[rank];
            }
            for (rank, &i) in order.iter().enumerate() {
                let w = weights[rank];
                let coeff = if i == anchor_i { 1.0 - wsum + w } else { w };
                axpy(coeff, g, ds_rows[i]);
            }
            // Softmax backward in canonical order.
            let mean_a: f64 = order.iter().enumerate().map(|(rank, _)| weights[rank] * a[rank]).sum();
            for (rank, &i) in order.iter().enumerate() {
                let dscore = weights[rank] * (a[rank] - mean_a);
                let kr = &kvs[i][row * c..(row + 1) * c];
                axpy(dscore * scale, kr, dq_row);
                axpy(dscore * scale, q, dk_rows[i]);
            }
        });
    }
    if nodes[q_proj.idx()].needs_grad {
        axpy(1.0, &dq, ensure_grad(nodes, q_proj));
    }
    for (i, &k) in key_projs.iter().enumerate() {
        if nodes[k.idx()].needs_grad {
            axpy(1.0, &dks[i], ensure_grad(nodes, k));
        }
    }
    for (i, &s) in sources.iter().enumerate() {
        if nodes[s.idx()].needs_grad {
            axpy(1.0, &dss[i], ensure_grad(nodes, s));
        }
    }
    Ok(())
}

fn composite_backward(
    nodes: &mut [Node],
    density: BufId,
    feats: BufId,
    background: BufId,
    deltas: &Arc<Vec<f64>>,
    offsets: &Arc<Vec<u32>>,
    dy: &[f64],
) {
    let c = nodes[feats.idx()].cols;
    let m = nodes[density.idx()].rows;
    let rays = offsets.len() - 1;
    let dv = nodes[density.idx()].values.clone();
    let fv = nodes[feats.idx()].values.clone();
    let bg = nodes[background.idx()].values.clone();

    let mut dd = vec![0.0; m];
    let mut df = vec![0.0; m * c];
    let mut tfinals = vec![0.0; rays];

    // Per-ray sample ranges are disjoint: carve them out for parallel writes.
    let mut ray_views: Vec<(usize, &mut [f64], &mut [f64], &mut f64)> = Vec::with_capacity(rays);
    {
        let mut dd_rest = dd.as_mut_slice();
        let mut df_rest = df.as_mut_slice();
        let mut tf_rest = tfinals.as_mut_slice();
        let mut consumed = 0usize;
        for ray in 0..rays {
            let end = offsets[ray + 1] as usize;
            let take = end - consumed;
            let (dd_head, dd_tail) = std::mem::take(&mut dd_rest).split_at_mut(take);
            dd_rest = dd_tail;
            let (df_head, df_tail) = std::mem::take(&mut df_rest).split_at_mut(take * c);
            df_rest = df_tail;
            let (tf_head, tf_tail) = std::mem::take(&mut tf_rest).split_at_mut(1);
            tf_rest = tf_tail;
            ray_views.push((ray, dd_head, df_head, &mut tf_head[0]));
            consumed = end;
        }
    }
    ray_views.into_par_iter().for_each(|(ray, dd_ray, df_ray, tf)| {
        let start = offsets[ray] as usize;
        let end = offsets[ray + 1] as usize;
        let g = &dy[ray * c..(ray + 1) * c];
        let count = end - start;
        let mut alphas = vec![0.0; count];
        let mut trans = vec![0.0; count];
        let mut t = 1.0f64;
        for (local, k) in (start..end).enumerate() {
            let alpha = 1.0 - (-dv[k] * deltas[k]).exp();
            alphas[local] = alpha;
            trans[local] = t;
            // d out / d feat_k = T_k * alpha_k * g
            axpy(t * alpha, g, &mut df_ray[local * c..(local + 1) * c]);
            t *= 1.0 - alpha;
        }
        *tf = t;
        // Reverse recurrence: d out / d alpha_k = T_k (A_k - G_k) where
        // A_k = <feat_k, g> and G carries the suffix contribution.
        let mut suffix = dot(&bg, g);
        for local in (0..count).rev() {
            let k = start + local;
            let a_k = dot(&fv[k * c..(k + 1) * c], g);
            let dalpha = trans[local] * (a_k - suffix);
            dd_ray[local] = dalpha * deltas[k] * (1.0 - alphas[local]);
            suffix = alphas[local] * a_k + (1.0 - alphas[local]) * suffix;
        }
    });

    if nodes[density.idx()].needs_grad {
        axpy(1.0, &dd, ensure_grad(nodes, density));
    }
    if nodes[feats.idx()].needs_grad {
        axpy(1.0, &df, ensure_grad(nodes, feats));
    }
    if nodes[background.idx()].needs_grad {
        let dbg = ensure_grad(nodes, background);
        for ray in 0..rays {
            axpy(tfinals[ray], &dy[ray * c..(ray + 1) * c], dbg);
        }
    }
}

// ── shared math helpers (also used by untaped forward paths) ─────────

/// Frequency-encode one 3-vector into `out` (length 3 + 6·bands).
/// Layout: `[v | band 0: sin(πv) (3), cos(πv) (3) | band 1: ... ]` with the
/// angle doubling per band. Uses the double-angle recurrence.
pub fn encode_row(v: &[f64], bands: usize, out: &mut [f64]) {
    out[..3].copy_from_slice(v);
    let mut s = [0.0; 3];
    let mut c = [0.0; 3];
    for a in 0..3 {
        let x = std::f64::consts::PI * v[a];
        s[a] = x.sin();
        c[a] = x.cos();
    }
    for l in 0..bands {
        let base = 3 + 6 * l;
        out[base..base + 3].copy_from_slice(&s);
        out[base + 3..base + 6].copy_from_slice(&c);
        for a in 0..3 {
            let (sa, ca) = (s[a], c[a]);
            s[a] = 2.0 * sa * ca;
            c[a] = 1.0 - 2.0 * sa * sa;
        }
    }
}

/// Project a world point onto one of the three axis-aligned planes.
/// Plane 0 = XY, 1 = XZ, 2 = YZ; coordinates are divided by `bound` and
/// clamped into [-1, 1].
pub fn project_plane(x: &[f64], plane: usize, bound: f64) -> (f64, f64) {
    let n = |v: f64| (v / bound).clamp(-1.0, 1.0);
    match plane {
        0 => (n(x[0]), n(x[1])),
        1 => (n(x[0]), n(x[2])),
        _ => (n(x[1]), n(x[2])),
    }
}

/// Align-corners bilinear taps for plane coordinates (u, v) in [-1, 1]:
/// returns up to four (flat texel index, weight) pairs within an R×R grid,
/// texel row = v index, texel col = u index.
pub fn bilinear_taps(u: f64, v: f64, r: usize) -> [(usize, f64); 4] {
    let grid = |t: f64| -> (usize, f64) {
        let g = (t + 1.0) * 0.5 * (r - 1) as f64;
        let i0 = (g.floor() as isize).clamp(0, r as isize - 2) as usize;
        (i0, g - i0 as f64)
    };
    if r == 1 {
        return [(0, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)];
    }
    let (iu, fu) = grid(u);
    let (iv, fv) = grid(v);
    [
        (iv * r + iu, (1.0 - fv) * (1.0 - fu)),
        (iv * r + iu + 1, (1.0 - fv) * fu),
        ((iv + 1) * r + iu, fv * (1.0 - fu)),
        ((iv + 1) * r + iu + 1, fv * fu),
    ]
}

/// Canonical source ordering for the attention mix: descending score, ties
/// broken by lexicographic comparison of the source rows. Invariant under
/// permutation of the inputs.
fn canonical_order(scores: &[f64], sources: &[&[f64]], row: usize, c: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                let ra = &sources[a][row * c..(row + 1) * c];
                let rb = &sources[b][row * c..(row + 1) * c];
                for j in 0..c {
                    match ra[j].partial_cmp(&rb[j]) {
                        Some(std::cmp::Ordering::Equal) | None => continue,
                        Some(o) => return o,
                    }
                }
                std::cmp::Ordering::Equal
            })
    });
    order
}

/// Max-subtracted softmax evaluated in the given order; returns weights
/// indexed by rank (same order as `order`).
fn softmax_ordered(scores: &[f64], order: &[usize]) -> Vec<f64> {
    let max = scores[order[0]];
    let exps: Vec<f64> = order.iter().map(|&i| (scores[i] - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}
