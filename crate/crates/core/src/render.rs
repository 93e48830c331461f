//! Volume rendering pieces: two-pass hierarchical depth sampling, per-sample
//! field heads, alpha compositing, and the feature-to-RGB upsampler.
//!
//! Compositing treats each sample as a homogeneous segment of length
//! `delta_k = t_{k+1} - t_k` (the last segment runs to `far`):
//! `alpha_k = 1 - exp(-density_k * delta_k)`, transmittance multiplies the
//! survival probabilities, and whatever transmittance remains picks up the
//! background vector. Per-ray weights plus the residual transmittance always
//! sum to 1 up to roundoff.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{ActKind, BufId, Tape};

/// Sorted per-ray samples with evaluated field outputs; `features` is
/// row-major `[n, channels]`.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub densities: Vec<f64>,
    pub features: Vec<f64>,
}

/// Stratified coarse depths: one uniform draw per equal bin of [near, far].
/// Strictly increasing by construction.
pub fn sample_coarse(near: f64, far: f64, nc: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if nc < 2 {
        return Err(Error::contract("sample_coarse", "need at least 2 samples"));
    }
    if !(near < far) {
        return Err(Error::contract("sample_coarse", format!("need near < far, got {near} .. {far}")));
    }
    let h = (far - near) / nc as f64;
    let mut depths = Vec::with_capacity(nc);
    for k in 0..nc {
        let u: f64 = rng.random::<f64>();
        depths.push(near + (k as f64 + u) * h);
    }
    Ok(depths)
}

/// Importance depths: inverse-CDF draws from the piecewise-constant PDF over
/// the coarse bins (weights floored by 1e-5 and normalized). Returns `nf`
/// draws, unsorted.
pub fn sample_fine(near: f64, far: f64, coarse_weights: &[f64], nf: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if coarse_weights.is_empty() {
        return Err(Error::contract("sample_fine", "no coarse weights"));
    }
    if coarse_weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::contract("sample_fine", "weights must be nonnegative"));
    }
    let nc = coarse_weights.len();
    let floored: Vec<f64> = coarse_weights.iter().map(|&w| w + 1e-5).collect();
    let total: f64 = floored.iter().sum();
    let h = (far - near) / nc as f64;
    let mut cdf = Vec::with_capacity(nc + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &w in &floored {
        acc += w / total;
        cdf.push(acc);
    }
    cdf[nc] = 1.0;
    let mut out = Vec::with_capacity(nf);
    for _ in 0..nf {
        let u: f64 = rng.random::<f64>();
        let k = cdf.partition_point(|&c| c <= u).min(nc) - 1;
        let p = floored[k] / total;
        let local = (u - cdf[k]) / p;
        out.push(near + (k as f64 + local.clamp(0.0, 1.0)) * h);
    }
    Ok(out)
}

/// Merge two depth lists into a sorted, exactly-deduplicated sequence.
pub fn merge_depths(coarse: &[f64], fine: &[f64]) -> Vec<f64> {
    let mut all = Vec::with_capacity(coarse.len() + fine.len());
    all.extend_from_slice(coarse);
    all.extend_from_slice(fine);
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

/// Per-sample path lengths for sorted depths: `t_{k+1} - t_k`, the last one
/// `far - t_last`. Errors on unsorted depths or depths beyond `far`.
pub fn deltas_from_depths(depths: &[f64], far: f64) -> Result<Vec<f64>> {
    if depths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("composite", "depths must be strictly increasing"));
    }
    if let Some(&last) = depths.last() {
        if last > far {
            return Err(Error::contract("composite", format!("last depth {last} beyond far {far}")));
        }
    }
    let mut deltas = Vec::with_capacity(depths.len());
    for w in depths.windows(2) {
        deltas.push(w[1] - w[0]);
    }
    if let Some(&last) = depths.last() {
        deltas.push(far - last);
    }
    Ok(deltas)
}

/// Forward-only single-ray compositing over evaluated samples. RGB channels
/// of `features` must already be squashed by the caller; `background` is the
/// vector returned verbatim for an empty or fully transparent ray.
/// Returns the composited vector and the residual transmittance.
pub fn composite(samples: &RaySamples, background: &[f64], far: f64) -> Result<(Vec<f64>, f64)> {
    let c = background.len();
    let n = samples.depths.len();
    if samples.densities.len() != n || samples.features.len() != n * c {
        return Err(Error::dim(
            "composite",
            format!("{n} densities and {n}x{c} features"),
            format!("{} densities, {} feature values", samples.densities.len(), samples.features.len()),
        ));
    }
    if samples.densities.iter().any(|&d| !(d >= 0.0)) {
        return Err(Error::contract("composite", "densities must be nonnegative"));
    }
    let deltas = deltas_from_depths(&samples.depths, far)?;
    let mut out = vec![0.0; c];
    let mut trans = 1.0f64;
    for k in 0..n {
        let alpha = 1.0 - (-samples.densities[k] * deltas[k]).exp();
        crate::kernels::axpy(trans * alpha, &samples.features[k * c..(k + 1) * c], &mut out);
        trans *= 1.0 - alpha;
    }
    crate::kernels::axpy(trans, background, &mut out);
    Ok((out, trans))
}

/// Per-sample compositing weights `T_k * alpha_k` plus the residual
/// transmittance (used by the fine-sampling pass and invariants).
pub fn compositing_weights(densities: &[f64], deltas: &[f64]) -> (Vec<f64>, f64) {
    let mut weights = Vec::with_capacity(densities.len());
    let mut trans = 1.0f64;
    for (&d, &dl) in densities.iter().zip(deltas) {
        let alpha = 1.0 - (-d * dl).exp();
        weights.push(trans * alpha);
        trans *= 1.0 - alpha;
    }
    (weights, trans)
}

/// Field-head widths: trunk 64 -> 128 -> 128 -> 128, density 128 -> 1,
/// features 128 -> 64 -> 32.
pub const FUSED_DIM: usize = 64;
pub const TRUNK_DIM: usize = 128;
pub const FEATURE_DIM: usize = 32;
pub const FEATURE_HIDDEN: usize = 64;

/// Tape handles of the field-head parameters (registration order of the
/// model's parameter set).
#[derive(Debug, Clone, Copy)]
pub struct FieldHeadIds {
    pub trunk1_w: BufId,
    pub trunk1_b: BufId,
    pub trunk2_w: BufId,
    pub trunk2_b: BufId,
    pub trunk3_w: BufId,
    pub trunk3_b: BufId,
    pub density_w: BufId,
    pub density_b: BufId,
    pub feat1_w: BufId,
    pub feat1_b: BufId,
    pub feat2_w: BufId,
    pub feat2_b: BufId,
}

/// Trunk over fused per-sample features `[S, 64] -> [S, 128]`.
pub fn trunk_on_tape(tape: &mut Tape, fused: BufId, ids: &FieldHeadIds) -> Result<BufId> {
    let h = tape.linear(fused, ids.trunk1_w, Some(ids.trunk1_b))?;
    let h = tape.activation(h, ActKind::Softplus)?;
    let h = tape.linear(h, ids.trunk2_w, Some(ids.trunk2_b))?;
    let h = tape.activation(h, ActKind::Softplus)?;
    let h = tape.linear(h, ids.trunk3_w, Some(ids.trunk3_b))?;
    tape.activation(h, ActKind::Softplus)
}

/// Density head `[S, 128] -> [S, 1]` (post-softplus).
pub fn density_head_on_tape(tape: &mut Tape, trunk: BufId, ids: &FieldHeadIds) -> Result<BufId> {
    let density = tape.linear(trunk, ids.density_w, Some(ids.density_b))?;
    tape.activation(density, ActKind::Softplus)
}

/// Feature head `[S, 128] -> [S, 32]` (raw; RGB squash happens at the
/// compositing stage).
pub fn feature_head_on_tape(tape: &mut Tape, trunk: BufId, ids: &FieldHeadIds) -> Result<BufId> {
    let f = tape.linear(trunk, ids.feat1_w, Some(ids.feat1_b))?;
    let f = tape.activation(f, ActKind::Softplus)?;
    tape.linear(f, ids.feat2_w, Some(ids.feat2_b))
}

/// Trunk and both heads over fused per-sample features `[S, 64]`.
/// Returns (densities `[S, 1]` post-softplus, raw features `[S, 32]`).
pub fn field_heads_on_tape(tape: &mut Tape, fused: BufId, ids: &FieldHeadIds) -> Result<(BufId, BufId)> {
    let h = trunk_on_tape(tape, fused, ids)?;
    let density = density_head_on_tape(tape, h, ids)?;
    let features = feature_head_on_tape(tape, h, ids)?;
    Ok((density, features))
}

/// Sigmoid-squash the first `rgb` columns, pass the rest through.
pub fn squash_rgb_on_tape(tape: &mut Tape, features: BufId, rgb: usize) -> Result<BufId> {
    let cols = tape.cols(features);
    let head = tape.slice_cols(features, 0, rgb)?;
    let head = tape.activation(head, ActKind::Sigmoid)?;
    if rgb == cols {
        return Ok(head);
    }
    let tail = tape.slice_cols(features, rgb, cols)?;
    tape.concat_cols(&[head, tail])
}

/// Linear depth-to-space upsampler: `[H*W, C] -> [(sH)*(sW), 3]` through a
/// per-pixel linear layer to `3*s*s` channels, rearrangement, and a sigmoid.
pub fn upsample_on_tape(
    tape: &mut Tape,
    features: BufId,
    w: BufId,
    b: BufId,
    h: usize,
    w_px: usize,
    s: usize,
) -> Result<BufId> {
    let lin = tape.linear(features, w, Some(b))?;
    if tape.cols(lin) != 3 * s * s {
        return Err(Error::dim("upsample", format!("{} channels", 3 * s * s), format!("{}", tape.cols(lin))));
    }
    let spread = tape.depth_to_space(lin, h, w_px, s)?;
    tape.activation(spread, ActKind::Sigmoid)
}

/// Composite a whole batch of rays on the tape (CSR offsets over samples).
pub fn composite_on_tape(
    tape: &mut Tape,
    density: BufId,
    features: BufId,
    background: BufId,
    deltas: Arc<Vec<f64>>,
    offsets: Arc<Vec<u32>>,
) -> Result<BufId> {
    tape.composite(density, features, background, deltas, offsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Rng whose uniform draws are all 0.5 (bin midpoints).
    struct HalfRng;
    impl rand::RngCore for HalfRng {
        fn next_u32(&mut self) -> u32 {
            1 << 31
        }
        fn next_u64(&mut self) -> u64 {
            1 << 63
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0);
        }
    }

    #[test]
    fn coarse_midpoint_rng_gives_bin_centers() {
        let depths = sample_coarse(0.5, 2.5, 8, &mut HalfRng).unwrap();
        let h = 2.0 / 8.0;
        for (k, d) in depths.iter().enumerate() {
            let expect = 0.5 + (k as f64 + 0.5) * h;
            assert!((d - expect).abs() < 1e-12, "{d} vs {expect}");
        }
    }

    #[test]
    fn coarse_depths_in_range_and_sorted() {
        let mut rng = rng::stream(1, "coarse");
        for _ in 0..100 {
            let depths = sample_coarse(0.3, 1.7, 24, &mut rng).unwrap();
            assert!(depths.windows(2).all(|w| w[0] < w[1]));
            assert!(depths.iter().all(|&d| (0.3..1.7).contains(&d)));
        }
    }

    #[test]
    fn coarse_bin_means_converge_to_centers() {
        let mut rng = rng::stream(2, "coarse-mean");
        let nc = 8;
        let mut sums = vec![0.0; nc];
        let trials = 10_000;
        for _ in 0..trials {
            let depths = sample_coarse(0.0, 1.0, nc, &mut rng).unwrap();
            for (k, d) in depths.iter().enumerate() {
                sums[k] += d;
            }
        }
        let h = 1.0 / nc as f64;
        for k in 0..nc {
            let mean = sums[k] / trials as f64;
            let center = (k as f64 + 0.5) * h;
            // sigma of the mean: h / sqrt(12 * trials)
            let sigma = h / (12.0 * trials as f64).sqrt();
            assert!((mean - center).abs() < 3.0 * sigma, "bin {k}: {mean} vs {center}");
        }
    }

    #[test]
    fn fine_samples_concentrate_in_the_heavy_bin() {
        let mut rng = rng::stream(3, "fine-conc");
        let mut weights = vec![0.0; 16];
        weights[5] = 10.0;
        let fine = sample_fine(0.0, 1.6, &weights, 64, &mut rng).unwrap();
        let h = 0.1;
        let inside = fine.iter().filter(|&&t| t >= 5.0 * h && t < 6.0 * h).count();
        // the floor leaks a little mass to other bins
        assert!(inside as f64 >= 0.95 * 64.0, "only {inside} of 64 inside the heavy bin");
    }

    #[test]
    fn fine_uniform_weights_pass_chi_square() {
        let mut rng = rng::stream(4, "fine-chi2");
        let nc = 16;
        let weights = vec![1.0; nc];
        let draws = 10_000;
        let fine = sample_fine(0.0, 1.0, &weights, draws, &mut rng).unwrap();
        let mut counts = vec![0usize; nc];
        for t in &fine {
            counts[((t * nc as f64) as usize).min(nc - 1)] += 1;
        }
        let expect = draws as f64 / nc as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // chi-square 0.99 quantile at 15 degrees of freedom
        assert!(chi2 < 30.58, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn fine_zero_weights_fall_back_to_uniform_without_nan() {
        let mut rng = rng::stream(5, "fine-zero");
        let fine = sample_fine(0.0, 1.0, &[0.0; 8], 100, &mut rng).unwrap();
        assert!(fine.iter().all(|t| t.is_finite() && (0.0..=1.0).contains(t)));
    }

    #[test]
    fn merge_sorts_and_dedups() {
        let merged = merge_depths(&[0.1, 0.3, 0.5], &[0.2, 0.3, 0.05]);
        assert_eq!(merged, vec![0.05, 0.1, 0.2, 0.3, 0.5]);
    }

    #[test]
    fn composite_zero_density_returns_background() {
        let samples = RaySamples {
            depths: vec![0.2, 0.4, 0.6],
            densities: vec![0.0; 3],
            features: vec![7.0; 9],
        };
        let bg = vec![0.25, -1.0, 3.0];
        let (out, trans) = composite(&samples, &bg, 1.0).unwrap();
        assert_eq!(out, bg);
        assert_eq!(trans, 1.0);
    }

    #[test]
    fn composite_opaque_front_sample_dominates() {
        let samples = RaySamples {
            depths: vec![0.2, 0.4],
            densities: vec![1e6, 0.5],
            features: vec![1.0, 2.0, 3.0, 9.0, 9.0, 9.0],
        };
        let (out, trans) = composite(&samples, &[0.0; 3], 1.0).unwrap();
        for (o, e) in out.iter().zip(&[1.0, 2.0, 3.0]) {
            assert!((o - e).abs() < 1e-9, "{out:?}");
        }
        assert!(trans < 1e-12);
    }

    #[test]
    fn composite_unsorted_depths_is_contract_error() {
        let samples = RaySamples {
            depths: vec![0.4, 0.2],
            densities: vec![0.1, 0.1],
            features: vec![0.0; 2],
        };
        assert!(composite(&samples, &[0.0], 1.0).is_err());
    }

    #[test]
    fn homogeneous_density_matches_analytic_transmittance() {
        // sigma = 1 over [0, 1] with 256 midpoint samples -> accumulated
        // opacity within 1e-3 of 1 - e^-1, and the error shrinks ~O(1/N)
        let expect = 1.0 - (-1.0f64).exp();
        let opacity_at = |n: usize| -> f64 {
            let depths = sample_coarse(0.0, 1.0, n, &mut HalfRng).unwrap();
            let count = depths.len();
            let samples = RaySamples {
                depths,
                densities: vec![1.0; count],
                features: vec![1.0; count],
            };
            let (_, trans) = composite(&samples, &[0.0], 1.0).unwrap();
            1.0 - trans
        };
        let err256 = (opacity_at(256) - expect).abs();
        assert!(err256 < 1e-3, "opacity error {err256}");
        let err512 = (opacity_at(512) - expect).abs();
        assert!(err512 < 0.6 * err256, "error did not shrink: {err256} -> {err512}");
    }

    #[test]
    fn weights_plus_residual_sum_to_one() {
        use rand::Rng;
        let mut rng = rng::stream(7, "weight-sum");
        for _ in 0..1000 {
            let n = rng.random_range(1..64);
            let densities: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..50.0)).collect();
            let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(1e-4..0.1)).collect();
            let (weights, trans) = compositing_weights(&densities, &deltas);
            let total: f64 = weights.iter().sum::<f64>() + trans;
            assert!((total - 1.0).abs() < 1e-12, "total {total}");
            assert!(weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn tape_composite_matches_forward_composite() {
        use rand::Rng;
        let mut rng = rng::stream(8, "tape-composite");
        let c = 5;
        let rays = 7;
        let mut offsets = vec![0u32];
        let mut depths_all = Vec::new();
        let mut densities = Vec::new();
        let mut feats = Vec::new();
        let far = 2.0;
        let mut per_ray = Vec::new();
        for _ in 0..rays {
            let n = rng.random_range(0..12);
            let mut depths: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.9)).collect();
            depths.sort_by(f64::total_cmp);
            depths.dedup();
            let n = depths.len();
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..30.0)).collect();
            let f: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            per_ray.push(RaySamples { depths: depths.clone(), densities: d.clone(), features: f.clone() });
            depths_all.extend(deltas_from_depths(&depths, far).unwrap());
            densities.extend(d);
            feats.extend(f);
            offsets.push(densities.len() as u32);
        }
        let bg: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut tape = Tape::new();
        let dn = tape.leaf(densities.clone(), densities.len(), 1).unwrap();
        let fe = tape.leaf(feats.clone(), densities.len(), c).unwrap();
        let bgn = tape.leaf(bg.clone(), 1, c).unwrap();
        let out = tape
            .composite(dn, fe, bgn, Arc::new(depths_all), Arc::new(offsets))
            .unwrap();
        for (ray, rs) in per_ray.iter().enumerate() {
            let (expect, _) = composite(rs, &bg, far).unwrap();
            let got = &tape.value(out)[ray * c..(ray + 1) * c];
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-12, "ray {ray}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        use crate::params::ParamSet;
        use crate::tensor::Tensor;
        use rand::Rng;
        let mut rng = rng::stream(9, "composite-fd");
        let c = 4;
        let n = 9;
        let offsets = Arc::new(vec![0u32, 4, 4, 9]); // middle ray empty
        let deltas = Arc::new((0..n).map(|_| rng.random_range(0.01..0.2)).collect::<Vec<f64>>());
        let mut params = ParamSet::new();
        params.add("density", Tensor::new(vec![n, 1], (0..n).map(|_| rng.random_range(0.1..8.0)).collect()).unwrap()).unwrap();
        params.add("feats", Tensor::new(vec![n, c], (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
        params.add("bg", Tensor::new(vec![c], (0..c).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()).unwrap();
        let forward = |p: &ParamSet| -> Result<(Tape, BufId, Vec<BufId>)> {
            let mut tape = Tape::new();
            let ids = p.register_on(&mut tape)?;
            let out = tape.composite(ids[0], ids[1], ids[2], deltas.clone(), offsets.clone())?;
            let sq = tape.mul(out, out)?;
            let root = tape.mean_all(sq)?;
            Ok((tape, root, ids))
        };
        let (mut tape, root, ids) = forward(&params).unwrap();
        tape.backward(root).unwrap();
        params.accumulate_grads(&tape, &ids);
        let report = crate::check::finite_diff_check(
            &mut params,
            |p| forward(p).map(|(t, r, _)| t.scalar_value(r)),
            crate::check::DEFAULT_EPSILON,
            12,
            10,
        )
        .unwrap();
        let worst = crate::check::worst_of(&report);
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn field_heads_zero_weights_closed_form() {
        use crate::tensor::Tensor;
        // zero weights and biases -> density softplus(0), features zero
        let mut params = crate::params::ParamSet::new();
        for (name, shape) in [
            ("trunk1_w", vec![FUSED_DIM, TRUNK_DIM]),
            ("trunk1_b", vec![TRUNK_DIM]),
            ("trunk2_w", vec![TRUNK_DIM, TRUNK_DIM]),
            ("trunk2_b", vec![TRUNK_DIM]),
            ("trunk3_w", vec![TRUNK_DIM, TRUNK_DIM]),
            ("trunk3_b", vec![TRUNK_DIM]),
            ("density_w", vec![TRUNK_DIM, 1]),
            ("density_b", vec![1]),
            ("feat1_w", vec![TRUNK_DIM, FEATURE_HIDDEN]),
            ("feat1_b", vec![FEATURE_HIDDEN]),
            ("feat2_w", vec![FEATURE_HIDDEN, FEATURE_DIM]),
            ("feat2_b", vec![FEATURE_DIM]),
        ] {
            params.add(name, Tensor::zeros(shape)).unwrap();
        }
        let mut tape = Tape::new();
        let ids = params.register_on(&mut tape).unwrap();
        let fused = tape.leaf(vec![0.0; 2 * FUSED_DIM], 2, FUSED_DIM).unwrap();
        let head_ids = FieldHeadIds {
            trunk1_w: ids[0],
            trunk1_b: ids[1],
            trunk2_w: ids[2],
            trunk2_b: ids[3],
            trunk3_w: ids[4],
            trunk3_b: ids[5],
            density_w: ids[6],
            density_b: ids[7],
            feat1_w: ids[8],
            feat1_b: ids[9],
            feat2_w: ids[10],
            feat2_b: ids[11],
        };
        let (density, feats) = field_heads_on_tape(&mut tape, fused, &head_ids).unwrap();
        let ln2 = 2.0f64.ln();
        for &d in tape.value(density) {
            assert!((d - ln2).abs() < 1e-15, "density {d}");
        }
        assert!(tape.value(feats).iter().all(|&f| f == 0.0));
    }

    #[test]
    fn density_head_bias_moves_density_monotonically() {
        use crate::tensor::Tensor;
        let run = |bias: f64| -> f64 {
            let mut tape = Tape::new();
            let fused = tape.leaf(vec![0.3; FUSED_DIM], 1, FUSED_DIM).unwrap();
            let mk = |tape: &mut Tape, rows: usize, cols: usize, fill: f64| {
                tape.leaf(vec![fill; rows * cols], rows, cols).unwrap()
            };
            let t1w = mk(&mut tape, FUSED_DIM, TRUNK_DIM, 0.01);
            let t1b = mk(&mut tape, 1, TRUNK_DIM, 0.0);
            let t2w = mk(&mut tape, TRUNK_DIM, TRUNK_DIM, 0.01);
            let t2b = mk(&mut tape, 1, TRUNK_DIM, 0.0);
            let t3w = mk(&mut tape, TRUNK_DIM, TRUNK_DIM, 0.01);
            let t3b = mk(&mut tape, 1, TRUNK_DIM, 0.0);
            let dw = mk(&mut tape, TRUNK_DIM, 1, 0.02);
            let db = tape.leaf(vec![bias], 1, 1).unwrap();
            let f1w = mk(&mut tape, TRUNK_DIM, FEATURE_HIDDEN, 0.01);
            let f1b = mk(&mut tape, 1, FEATURE_HIDDEN, 0.0);
            let f2w = mk(&mut tape, FEATURE_HIDDEN, FEATURE_DIM, 0.01);
            let f2b = mk(&mut tape, 1, FEATURE_DIM, 0.0);
            let ids = FieldHeadIds {
                trunk1_w: t1w,
                trunk1_b: t1b,
                trunk2_w: t2w,
                trunk2_b: t2b,
                trunk3_w: t3w,
                trunk3_b: t3b,
                density_w: dw,
                density_b: db,
                feat1_w: f1w,
                feat1_b: f1b,
                feat2_w: f2w,
                feat2_b: f2b,
            };
            let (density, _) = field_heads_on_tape(&mut tape, fused, &ids).unwrap();
            tape.value(density)[0]
        };
        let (a, b, c) = (run(-1.0), run(0.0), run(1.0));
        assert!(a < b && b < c, "{a} {b} {c}");
        let _ = Tensor::zeros(vec![1]);
    }

    #[test]
    fn upsample_zero_head_gives_uniform_half_and_right_dims() {
        let (h, w, s) = (4, 4, 4);
        let mut tape = Tape::new();
        let feats = tape.leaf(vec![0.7; h * w * 32], h * w, 32).unwrap();
        let wid = tape.leaf(vec![0.0; 32 * 3 * s * s], 32, 3 * s * s).unwrap();
        let bid = tape.leaf(vec![0.0; 3 * s * s], 1, 3 * s * s).unwrap();
        let out = upsample_on_tape(&mut tape, feats, wid, bid, h, w, s).unwrap();
        assert_eq!(tape.rows(out), (s * h) * (s * w));
        assert_eq!(tape.cols(out), 3);
        assert!(tape.value(out).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn upsample_gradients_match_finite_differences() {
        use crate::params::ParamSet;
        use crate::tensor::Tensor;
        use rand::Rng;
        let (h, w, s) = (2, 2, 4);
        let mut rng = rng::stream(11, "upsample-fd");
        let feats: Vec<f64> = (0..h * w * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut params = ParamSet::new();
        params.add("w", Tensor::new(vec![8, 3 * s * s], (0..8 * 3 * s * s).map(|_| rng.random_range(-0.3..0.3)).collect()).unwrap()).unwrap();
        params.add("b", Tensor::new(vec![3 * s * s], (0..3 * s * s).map(|_| rng.random_range(-0.1..0.1)).collect()).unwrap()).unwrap();
        let forward = |p: &ParamSet| -> Result<(Tape, BufId, Vec<BufId>)> {
            let mut tape = Tape::new();
            let ids = p.register_on(&mut tape)?;
            let f = tape.leaf(feats.clone(), h * w, 8)?;
            let out = upsample_on_tape(&mut tape, f, ids[0], ids[1], h, w, s)?;
            let sq = tape.mul(out, out)?;
            let root = tape.mean_all(sq)?;
            Ok((tape, root, ids))
        };
        let (mut tape, root, ids) = forward(&params).unwrap();
        tape.backward(root).unwrap();
        params.accumulate_grads(&tape, &ids);
        let report = crate::check::finite_diff_check(
            &mut params,
            |p| forward(p).map(|(t, r, _)| t.scalar_value(r)),
            crate::check::DEFAULT_EPSILON,
            10,
            12,
        )
        .unwrap();
        let worst = crate::check::worst_of(&report);
        assert!(worst < 1e-4, "worst rel err {worst}");
    }
}
