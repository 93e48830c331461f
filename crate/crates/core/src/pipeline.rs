//! Full pipeline: point cloud deformation, neighbor indexing, plane fusion,
//! two-pass hierarchical rendering, losses, and the desk-scale fitting loop.
//!
//! Rendering is deterministic given `(parameters, inputs, seed)`: per-ray RNG
//! streams derive from the seed and the pixel index, gradient reductions run
//! in fixed orders, and the per-step batch/source draws derive statelessly
//! from `(seed, step)` so an interrupted run resumes on exactly the same
//! trajectory.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::camera::{clip_to_cube, generate_rays, Camera};
use crate::error::{Error, Result};
use crate::expr_field::NeighborBatch;
use crate::image_io::RgbImage;
use crate::knn::{BruteIndex, GridIndex, SpatialIndex};
use crate::model::{AvatarModel, FEATURE_CHANNELS};
use crate::objectives::{overall_loss_on_tape, LossReport, LossWeights};
use crate::oracle::AnalyticScene;
use crate::points::{evaluate_point_model, FlameParams, PointCloud};
use crate::render::{
    compositing_weights, merge_depths, sample_coarse, sample_fine,
    squash_rgb_on_tape, upsample_on_tape, FieldHeadIds,
};
use crate::rng;
use crate::tape::{BufId, Tape};

/// Point count above which the per-frame index switches from the vectorized
/// brute-force scan to the uniform grid.
const BRUTE_THRESHOLD: usize = 2048;

fn build_frame_index(cloud: &PointCloud, bound: f64) -> Result<Box<dyn SpatialIndex>> {
    if cloud.len() <= BRUTE_THRESHOLD {
        Ok(Box::new(BruteIndex::build(cloud)?))
    } else {
        Ok(Box::new(GridIndex::build(cloud, bound)?))
    }
}

/// Tape handles produced by one forward render.
#[derive(Debug, Clone)]
pub struct ForwardHandles {
    /// `[low_h * low_w, 32]`, RGB channels squashed into [0, 1].
    pub low_feature: BufId,
    /// `[low_h * low_w, 3]` RGB slice of the feature image.
    pub low_rgb: BufId,
    /// `[(s·low_h) * (s·low_w), 3]` upsampled image.
    pub high: BufId,
    /// `[S, 1]` all sampled densities (for the density norm).
    pub densities: BufId,
    /// Parameter leaves in the model's registration order.
    pub param_ids: Vec<BufId>,
}

struct ChunkInputs {
    table: BufId,
    pef_l1_w: BufId,
    pef_l1_b: BufId,
    pef_l2_w: BufId,
    pef_l2_b: BufId,
    fused_planes: BufId,
    heads: FieldHeadIds,
    background: BufId,
}

impl ChunkInputs {
    fn as_vec(&self) -> Vec<BufId> {
        vec![
            self.table,
            self.pef_l1_w,
            self.pef_l1_b,
            self.pef_l2_w,
            self.pef_l2_b,
            self.fused_planes,
            self.heads.trunk1_w,
            self.heads.trunk1_b,
            self.heads.trunk2_w,
            self.heads.trunk2_b,
            self.heads.trunk3_w,
            self.heads.trunk3_b,
            self.heads.density_w,
            self.heads.density_b,
            self.heads.feat1_w,
            self.heads.feat1_b,
            self.heads.feat2_w,
            self.heads.feat2_b,
            self.background,
        ]
    }

    fn from_ids(ids: &[BufId]) -> ChunkInputs {
        ChunkInputs {
            table: ids[0],
            pef_l1_w: ids[1],
            pef_l1_b: ids[2],
            pef_l2_w: ids[3],
            pef_l2_b: ids[4],
            fused_planes: ids[5],
            heads: FieldHeadIds {
                trunk1_w: ids[6],
                trunk1_b: ids[7],
                trunk2_w: ids[8],
                trunk2_b: ids[9],
                trunk3_w: ids[10],
                trunk3_b: ids[11],
                density_w: ids[12],
                density_b: ids[13],
                feat1_w: ids[14],
                feat1_b: ids[15],
                feat2_w: ids[16],
                feat2_b: ids[17],
            },
            background: ids[18],
        }
    }
}

/// Per-sample field evaluation and per-ray compositing for one ray range.
/// Returns (composited rows `[rays, 32]`, densities `[S, 1]`).
#[allow(clippy::too_many_arguments)]
fn field_chunk(
    tape: &mut Tape,
    inputs: &ChunkInputs,
    coords: &[f64],
    batch: &NeighborBatch,
    deltas: Arc<Vec<f64>>,
    ray_offsets: Arc<Vec<u32>>,
    model: &AvatarModel,
    density_only: bool,
) -> Result<(Option<BufId>, BufId)> {
    let cfg = &model.cfg;
    let expr_features = if cfg.disable_expr_field {
        tape.leaf(vec![0.0; batch.samples() * FEATURE_CHANNELS], batch.samples(), FEATURE_CHANNELS)?
    } else {
        crate::expr_field::features_on_tape(
            tape,
            inputs.table,
            inputs.pef_l1_w,
            inputs.pef_l1_b,
            inputs.pef_l2_w,
            inputs.pef_l2_b,
            batch,
            &cfg.expr_field,
        )?
    };
    let plane_features = tape.bilinear_planes(
        inputs.fused_planes,
        Arc::new(coords.to_vec()),
        cfg.triplane_resolution,
        cfg.scene_bound,
    )?;
    let fused = tape.concat_cols(&[plane_features, expr_features])?;
    let trunk = crate::render::trunk_on_tape(tape, fused, &inputs.heads)?;
    let density = crate::render::density_head_on_tape(tape, trunk, &inputs.heads)?;
    if density_only {
        return Ok((None, density));
    }
    let feats = crate::render::feature_head_on_tape(tape, trunk, &inputs.heads)?;
    let squashed = squash_rgb_on_tape(tape, feats, 3)?;
    let composited = tape.composite(density, squashed, inputs.background, deltas, ray_offsets)?;
    Ok((Some(composited), density))
}

/// Depth structure of one render: per-pixel sorted sample depths (empty for
/// rays that miss the cube) and the per-ray integration end.
struct DepthPlan {
    depths: Vec<Vec<f64>>,
    t_far: Vec<f64>,
    positions_of: Vec<[f64; 3]>, // ray origin
    directions: Vec<[f64; 3]>,
}

impl DepthPlan {
    fn coords_for(&self, rays: std::ops::Range<usize>) -> (Vec<f64>, Vec<f64>, Vec<u32>) {
        let mut coords = Vec::new();
        let mut deltas = Vec::new();
        let mut offsets = vec![0u32];
        for ri in rays {
            let depths = &self.depths[ri];
            let (o, d) = (self.positions_of[ri], self.directions[ri]);
            for (k, &t) in depths.iter().enumerate() {
                coords.extend_from_slice(&[o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
                let next = if k + 1 < depths.len() { depths[k + 1] } else { self.t_far[ri] };
                deltas.push(next - t);
            }
            offsets.push(deltas.len() as u32);
        }
        (coords, deltas, offsets)
    }
}

/// One full differentiable render. `active_slots` selects the source planes
/// fused this pass; `render_seed` drives the per-pixel depth sampling;
/// `train` registers parameters as trainable leaves.
pub fn forward_render(
    model: &AvatarModel,
    flame: &FlameParams,
    camera: &Camera,
    active_slots: &[usize],
    render_seed: u64,
    train: bool,
) -> Result<(Tape, ForwardHandles)> {
    let cfg = &model.cfg;
    if active_slots.is_empty() {
        return Err(Error::contract("forward_render", "active slot set must be nonempty"));
    }
    for &s in active_slots {
        if s >= cfg.source_slots {
            return Err(Error::contract("forward_render", format!("slot {s} out of range")));
        }
    }
    let trace = std::env::var_os("AVATAR_TRACE_RENDER").is_some();
    let mut t0 = std::time::Instant::now();
    let mut mark = move |label: &str| {
        if trace {
            eprintln!("  [render] {label}: {:.0} ms", t0.elapsed().as_secs_f64() * 1e3);
            t0 = std::time::Instant::now();
        }
    };
    let effective = if cfg.freeze_cloud {
        FlameParams::zeros(&model.asset)
    } else {
        flame.clone()
    };
    let cloud = evaluate_point_model(&model.asset, &effective)?;
    let index = build_frame_index(&cloud, cfg.scene_bound)?;

    let mut tape = Tape::new();
    let param_ids: Vec<BufId> = if train {
        model.params.register_on(&mut tape)?
    } else {
        model
            .params
            .iter()
            .map(|p| {
                let (rows, cols) = crate::params::view2d(p.tensor.shape());
                tape.leaf(p.tensor.values().to_vec(), rows, cols)
            })
            .collect::<Result<_>>()?
    };
    let l = &model.layout;
    let id = |i: usize| param_ids[i];

    // plane fusion over the active slots
    let sources: Vec<BufId> = active_slots.iter().map(|&s| id(l.planes[s])).collect();
    let fused_planes = crate::attention::fuse_on_tape(
        &mut tape,
        id(l.query),
        id(l.lq_w),
        id(l.lq_b),
        id(l.lk_w),
        id(l.lk_b),
        &sources,
    )?;

    // background with squashed RGB channels
    let background = squash_rgb_on_tape(&mut tape, id(l.background), 3)?;

    mark("setup+fusion");
    let inputs = ChunkInputs {
        table: id(l.table),
        pef_l1_w: id(l.pef_l1_w),
        pef_l1_b: id(l.pef_l1_b),
        pef_l2_w: id(l.pef_l2_w),
        pef_l2_b: id(l.pef_l2_b),
        fused_planes,
        heads: FieldHeadIds {
            trunk1_w: id(l.trunk1_w),
            trunk1_b: id(l.trunk1_b),
            trunk2_w: id(l.trunk2_w),
            trunk2_b: id(l.trunk2_b),
            trunk3_w: id(l.trunk3_w),
            trunk3_b: id(l.trunk3_b),
            density_w: id(l.density_w),
            density_b: id(l.density_b),
            feat1_w: id(l.feat1_w),
            feat1_b: id(l.feat1_b),
            feat2_w: id(l.feat2_w),
            feat2_b: id(l.feat2_b),
        },
        background,
    };

    // ── depth planning: coarse pass, importance pass ────────────────
    let (h, w) = (cfg.low_h, cfg.low_w);
    let rays = generate_rays(camera, h, w)?;
    let mut plan = DepthPlan {
        depths: Vec::with_capacity(h * w),
        t_far: Vec::with_capacity(h * w),
        positions_of: rays.iter().map(|r| r.origin).collect(),
        directions: rays.iter().map(|r| r.direction).collect(),
    };
    mark("rays");
    let mut coarse: Vec<Vec<f64>> = Vec::with_capacity(h * w);
    let mut spans: Vec<Option<(f64, f64)>> = Vec::with_capacity(h * w);
    for (pi, ray) in rays.iter().enumerate() {
        let span = clip_to_cube(ray, cfg.scene_bound, camera.near, camera.far);
        spans.push(span);
        match span {
            Some((t0, t1)) => {
                let mut rng = rng::indexed_stream(render_seed, "ray", pi as u64);
                coarse.push(sample_coarse(t0, t1, cfg.coarse_samples, &mut rng)?);
            }
            None => coarse.push(Vec::new()),
        }
    }

    mark("coarse sampling");
    // ── coarse density scout, neighbor queries reused downstream ────
    let coarse_plan = DepthPlan {
        depths: coarse.clone(),
        t_far: spans.iter().map(|s| s.map_or(0.0, |(_, t1)| t1)).collect(),
        positions_of: plan.positions_of.clone(),
        directions: plan.directions.clone(),
    };
    let (c_coords, c_deltas, c_offsets) = coarse_plan.coords_for(0..h * w);
    let coarse_knn: Vec<crate::knn::KnnResult> = if cfg.disable_expr_field {
        Vec::new()
    } else {
        index.query_batch(&c_coords, cfg.expr_field.k, cfg.expr_field.local_radius_cap)?
    };
    mark("coarse knn");

    let fine = if cfg.fine_samples > 0 {
        let batch = if cfg.disable_expr_field {
            empty_batch(c_coords.len() / 3)
        } else {
            NeighborBatch::from_results(&c_coords, &coarse_knn, index.positions())
        };
        let mut scout = Tape::new();
        let s_inputs = clone_inputs_forward(&tape, &mut scout, &inputs)?;
        let (_, density) = field_chunk(
            &mut scout,
            &s_inputs,
            &c_coords,
            &batch,
            Arc::new(c_deltas.clone()),
            Arc::new(c_offsets.clone()),
            model,
            true,
        )?;
        let densities = scout.value(density);
        let mut fine = Vec::with_capacity(h * w);
        for pi in 0..h * w {
            match spans[pi] {
                Some((t0, t1)) => {
                    let lo = c_offsets[pi] as usize;
                    let hi = c_offsets[pi + 1] as usize;
                    let (weights, _) = compositing_weights(&densities[lo..hi], &c_deltas[lo..hi]);
                    let mut rng = rng::indexed_stream(render_seed, "ray-fine", pi as u64);
                    let mut draws = sample_fine(t0, t1, &weights, cfg.fine_samples, &mut rng)?;
                    draws.sort_by(f64::total_cmp);
                    fine.push(draws);
                }
                None => fine.push(Vec::new()),
            }
        }
        mark("scout eval + fine draw");
        fine
    } else {
        vec![Vec::new(); h * w]
    };

    // neighbor queries for the fine positions only
    let mut f_coords = Vec::new();
    let mut fine_row_start = vec![0u32; h * w + 1];
    for pi in 0..h * w {
        let (o, d) = (plan.positions_of[pi], plan.directions[pi]);
        for &t in &fine[pi] {
            f_coords.extend_from_slice(&[o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
        }
        fine_row_start[pi + 1] = (f_coords.len() / 3) as u32;
    }
    let fine_knn: Vec<crate::knn::KnnResult> = if cfg.disable_expr_field || f_coords.is_empty() {
        Vec::new()
    } else {
        index.query_batch(&f_coords, cfg.expr_field.k, cfg.expr_field.local_radius_cap)?
    };
    mark("fine knn");

    // provenance-tracking merge: sorted unique depths per ray, each sample
    // pointing at its already-computed neighbor result
    let mut merged_src: Vec<Vec<u32>> = Vec::with_capacity(h * w);
    let coarse_total = (c_coords.len() / 3) as u32;
    for pi in 0..h * w {
        let c = &coarse[pi];
        let f = &fine[pi];
        let cbase = c_offsets[pi];
        let fbase = fine_row_start[pi];
        let mut depths = Vec::with_capacity(c.len() + f.len());
        let mut src = Vec::with_capacity(c.len() + f.len());
        let (mut i, mut j) = (0usize, 0usize);
        while i < c.len() || j < f.len() {
            let take_coarse = match (c.get(i), f.get(j)) {
                (Some(&cd), Some(&fd)) => cd <= fd,
                (Some(_), None) => true,
                _ => false,
            };
            if take_coarse {
                if depths.last() != Some(&c[i]) {
                    depths.push(c[i]);
                    src.push(cbase + i as u32);
                }
                i += 1;
            } else {
                if depths.last() != Some(&f[j]) {
                    depths.push(f[j]);
                    src.push(coarse_total + fbase + j as u32);
                }
                j += 1;
            }
        }
        plan.depths.push(depths);
        plan.t_far.push(spans[pi].map_or(0.0, |(_, t1)| t1));
        merged_src.push(src);
    }

    let lookup_knn = |src: u32| -> &crate::knn::KnnResult {
        if src < coarse_total {
            &coarse_knn[src as usize]
        } else {
            &fine_knn[(src - coarse_total) as usize]
        }
    };

    // ── differentiable pass over ray chunks ─────────────────────────
    let chunk_rays = if cfg.memory_saver { cfg.chunk_rays } else { h * w };
    let mut composited_chunks = Vec::new();
    let mut density_chunks = Vec::new();
    let mut start = 0usize;
    while start < h * w {
        let end = (start + chunk_rays).min(h * w);
        let (coords, deltas, offsets) = plan.coords_for(start..end);
        let batch = if cfg.disable_expr_field {
            empty_batch(coords.len() / 3)
        } else {
            let results: Vec<crate::knn::KnnResult> = merged_src[start..end]
                .iter()
                .flat_map(|srcs| srcs.iter().map(|&s| lookup_knn(s).clone()))
                .collect();
            NeighborBatch::from_results(&coords, &results, index.positions())
        };
        let deltas = Arc::new(deltas);
        let offsets = Arc::new(offsets);
        if cfg.memory_saver {
            let outs = tape.subgraph(&inputs.as_vec(), |child, ids| {
                let ci = ChunkInputs::from_ids(ids);
                let (composited, density) =
                    field_chunk(child, &ci, &coords, &batch, deltas.clone(), offsets.clone(), model, false)?;
                Ok(vec![composited.expect("composited chunk"), density])
            })?;
            composited_chunks.push(outs[0]);
            density_chunks.push(outs[1]);
        } else {
            let (composited, density) =
                field_chunk(&mut tape, &inputs, &coords, &batch, deltas, offsets, model, false)?;
            composited_chunks.push(composited.expect("composited chunk"));
            density_chunks.push(density);
        }
        mark("chunk eval");
        start = end;
    }

    let low_feature = if composited_chunks.len() == 1 {
        composited_chunks[0]
    } else {
        tape.stack_rows(&composited_chunks)?
    };
    let densities = if density_chunks.len() == 1 {
        density_chunks[0]
    } else {
        tape.stack_rows(&density_chunks)?
    };
    let low_rgb = tape.slice_cols(low_feature, 0, 3)?;
    let high = upsample_on_tape(
        &mut tape,
        low_feature,
        id(l.upsample_w),
        id(l.upsample_b),
        h,
        w,
        cfg.upsample_factor,
    )?;

    Ok((
        tape,
        ForwardHandles { low_feature, low_rgb, high, densities, param_ids },
    ))
}

fn empty_batch(samples: usize) -> NeighborBatch {
    NeighborBatch {
        offsets: Arc::new(vec![0u32; samples + 1]),
        indices: Arc::new(Vec::new()),
        weights: Arc::new(Vec::new()),
        rel: Arc::new(Vec::new()),
        empty_samples: samples,
    }
}

/// Copy the chunk inputs of `src` into fresh constant leaves on `dst`
/// (the coarse scouting pass never needs gradients).
fn clone_inputs_forward(src: &Tape, dst: &mut Tape, inputs: &ChunkInputs) -> Result<ChunkInputs> {
    let ids = inputs.as_vec();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        out.push(dst.leaf(src.value(id).to_vec(), src.rows(id), src.cols(id))?);
    }
    Ok(ChunkInputs::from_ids(&out))
}

/// Render to images: the low-resolution feature image's RGB channels and the
/// upsampled output.
pub fn render_images(
    model: &AvatarModel,
    flame: &FlameParams,
    camera: &Camera,
    active_slots: &[usize],
    render_seed: u64,
) -> Result<(RgbImage, RgbImage, Vec<f64>)> {
    let (tape, handles) = forward_render(model, flame, camera, active_slots, render_seed, false)?;
    let cfg = &model.cfg;
    let s = cfg.upsample_factor;
    let low = RgbImage::new(cfg.low_h, cfg.low_w, tape.value(handles.low_rgb).to_vec())?;
    let high = RgbImage::new(cfg.low_h * s, cfg.low_w * s, tape.value(handles.high).to_vec())?;
    let feature = tape.value(handles.low_feature).to_vec();
    Ok((low, high, feature))
}

// ── dataset manifest ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Role {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "holdout")]
    Holdout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub camera: Camera,
    pub flame: FlameParams,
    pub file: String,
    pub role: Role,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub asset: String,
    pub scene: String,
    pub entries: Vec<ManifestEntry>,
}

/// Manifest with targets loaded into memory.
pub struct Dataset {
    pub manifest: Manifest,
    pub targets: Vec<RgbImage>,
    pub scene: AnalyticScene,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
        let scene = crate::oracle::load_scene(&dir.join(&manifest.scene))?;
        let mut targets = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            targets.push(crate::image_io::read_ppm(&dir.join(&e.file))?);
        }
        Ok(Dataset { manifest, targets, scene })
    }

    pub fn indices_of(&self, role: Role) -> Vec<usize> {
        self.manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.role == role)
            .map(|(i, _)| i)
            .collect()
    }
}

// ── fitting ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: u64,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub two_source_prob: f64,
    pub eval_every: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 1200,
            lr: 1e-4,
            seed: 7,
            weights: LossWeights::default(),
            two_source_prob: 0.7,
            eval_every: 200,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.two_source_prob) {
            return Err(Error::Validation("two_source_prob must lie in [0, 1]".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Validation("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Slot subset for one step: with probability `p_two` (when at least two
/// slots exist) a uniformly random unordered pair, otherwise a singleton.
pub fn sample_sources(rng: &mut impl Rng, n: usize, p_two: f64) -> Vec<usize> {
    debug_assert!(n >= 1);
    if n >= 2 && rng.random::<f64>() < p_two {
        let a = rng.random_range(0..n);
        let b = loop {
            let b = rng.random_range(0..n);
            if b != a {
                break b;
            }
        };
        vec![a.min(b), a.max(b)]
    } else {
        vec![rng.random_range(0..n)]
    }
}

/// One optimization step on one target. Returns the loss decomposition.
pub fn fit_step(
    model: &mut AvatarModel,
    adam: &mut AdamState,
    flame: &FlameParams,
    camera: &Camera,
    target: &RgbImage,
    active_slots: &[usize],
    weights: &LossWeights,
    render_seed: u64,
) -> Result<LossReport> {
    let (mut tape, handles) = forward_render(model, flame, camera, active_slots, render_seed, true)?;
    let (report, root) = overall_loss_on_tape(
        &mut tape,
        handles.low_rgb,
        handles.high,
        handles.densities,
        target,
        model.cfg.low_h,
        model.cfg.low_w,
        weights,
    )?;
    tape.backward(root)?;
    model.params.accumulate_grads(&tape, &handles.param_ids);
    adam.step(&mut model.params)?;
    model.params.zero_grads();
    Ok(report)
}

/// Metrics of one holdout evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

/// Render every holdout entry (all slots active) and average the metrics.
pub fn evaluate_holdout(model: &AvatarModel, dataset: &Dataset, eval_seed: u64) -> Result<EvalMetrics> {
    let holdout = dataset.indices_of(Role::Holdout);
    if holdout.is_empty() {
        return Err(Error::contract("evaluate_holdout", "no holdout entries"));
    }
    let all_slots: Vec<usize> = (0..model.cfg.source_slots).collect();
    let (mut psnr_sum, mut ssim_sum, mut l1_sum) = (0.0, 0.0, 0.0);
    for (j, &i) in holdout.iter().enumerate() {
        let e = &dataset.manifest.entries[i];
        let (_, high, _) = render_images(model, &e.flame, &e.camera, &all_slots, rng::derive(eval_seed, "eval", j as u64))?;
        psnr_sum += crate::objectives::psnr(&high, &dataset.targets[i])?;
        ssim_sum += crate::objectives::ssim(&high, &dataset.targets[i])?;
        l1_sum += crate::objectives::l1_metric(&high, &dataset.targets[i])?;
    }
    let n = holdout.len() as f64;
    Ok(EvalMetrics {
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        l1: l1_sum / n,
    })
}

/// Run the fitting loop: per-step CSV metrics, periodic holdout evaluation,
/// and an atomic checkpoint (parameters + optimizer state) at the end.
/// `start_step` > 0 resumes a loaded model/optimizer mid-run.
pub fn fit_loop(
    model: &mut AvatarModel,
    dataset: &Dataset,
    cfg: &FitConfig,
    adam: &mut AdamState,
    start_step: u64,
    out_dir: &Path,
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    let train = dataset.indices_of(Role::Train);
    if train.len() < 2 {
        return Err(Error::contract("fit_loop", "need at least 2 training entries"));
    }
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("metrics.csv");
    let mut csv = if start_step == 0 {
        let mut f = std::fs::File::create(&csv_path)?;
        writeln!(f, "step,l1_lr,l1_hr,perc_lr,perc_hr,rec,norm,overall,psnr_holdout")?;
        f
    } else {
        std::fs::OpenOptions::new().append(true).open(&csv_path)?
    };

    let mut reports = Vec::with_capacity((cfg.steps - start_step) as usize);
    for step in start_step..cfg.steps {
        let mut batch_rng = rng::indexed_stream(cfg.seed, "batch", step);
        let ti = train[batch_rng.random_range(0..train.len())];
        let mut source_rng = rng::indexed_stream(cfg.seed, "sources", step);
        let slots = sample_sources(&mut source_rng, model.cfg.source_slots, cfg.two_source_prob);
        let entry = &dataset.manifest.entries[ti];
        let report = fit_step(
            model,
            adam,
            &entry.flame,
            &entry.camera,
            &dataset.targets[ti],
            &slots,
            &cfg.weights,
            rng::derive(cfg.seed, "render", step),
        )?;
        let holdout_txt = if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
            let m = evaluate_holdout(model, dataset, cfg.seed)?;
            format!("{:.17e}", m.psnr)
        } else {
            String::new()
        };
        writeln!(
            csv,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            step, report.l1_lr, report.l1_hr, report.perc_lr, report.perc_hr, report.rec, report.norm, report.overall, holdout_txt
        )?;
        reports.push(report);
    }
    csv.flush()?;
    model.save_checkpoint(&out_dir.join("checkpoint.bin"), Some(adam))?;
    Ok(reports)
}
