//! Parametric point model: template positions plus linear shape, pose, and
//! expression blendshape bases.
//!
//! The deformed cloud is `template + S·β + P·θ + E·ψ`. Global rotation and
//! translation are deliberately absent from the model; rigid head pose is
//! expressed through camera extrinsics so the cloud always stays in a
//! canonical position near the origin. A seeded toy-asset generator stands in
//! for licensed morphable-model data; real assets of any point count convert
//! to the same file format.

use std::f64::consts::PI;
use std::path::Path;

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Template positions plus blendshape bases.
///
/// Bases are stored row-major as `[P, 3, N]`: the innermost axis is the
/// basis column, so evaluating all columns for one coordinate is contiguous.
#[derive(Debug, Clone)]
pub struct PointModelAsset {
    pub template: Tensor,    // [P, 3]
    pub shape_basis: Tensor, // [P, 3, Ns]
    pub pose_basis: Tensor,  // [P, 3, Np]
    pub expr_basis: Tensor,  // [P, 3, Ne]
    pub scene_bound: f64,
}

/// Coefficients for one evaluation of the point model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlameParams {
    pub shape: Vec<f64>,
    pub pose: Vec<f64>,
    pub expr: Vec<f64>,
}

impl FlameParams {
    pub fn zeros(asset: &PointModelAsset) -> Self {
        FlameParams {
            shape: vec![0.0; asset.shape_dim()],
            pose: vec![0.0; asset.pose_dim()],
            expr: vec![0.0; asset.expr_dim()],
        }
    }

    /// Zero shape/pose with the given expression coefficients.
    pub fn expression(asset: &PointModelAsset, expr: Vec<f64>) -> Self {
        FlameParams {
            shape: vec![0.0; asset.shape_dim()],
            pose: vec![0.0; asset.pose_dim()],
            expr,
        }
    }
}

/// Deformed point positions, `[P, 3]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<f64>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        [self.positions[i * 3], self.positions[i * 3 + 1], self.positions[i * 3 + 2]]
    }
}

impl PointModelAsset {
    pub fn point_count(&self) -> usize {
        self.template.shape()[0]
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.shape()[2]
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_basis.shape()[2]
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_basis.shape()[2]
    }

    /// Validate internal dimension agreement and template containment.
    pub fn validate(&self) -> Result<()> {
        let p = self.point_count();
        if p < 1 {
            return Err(Error::Validation("asset has no points".into()));
        }
        for (name, basis) in [
            ("shape_basis", &self.shape_basis),
            ("pose_basis", &self.pose_basis),
            ("expr_basis", &self.expr_basis),
        ] {
            let s = basis.shape();
            if s.len() != 3 || s[0] != p || s[1] != 3 {
                return Err(Error::Validation(format!(
                    "{name} has shape {s:?}, expected [{p}, 3, N]"
                )));
            }
        }
        if self.template.shape() != [p, 3] {
            return Err(Error::Validation(format!(
                "template has shape {:?}, expected [{p}, 3]",
                self.template.shape()
            )));
        }
        if self.scene_bound <= 0.0 {
            return Err(Error::Validation("scene_bound must be positive".into()));
        }
        let worst = self.template.values().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        if worst > self.scene_bound {
            return Err(Error::Validation(format!(
                "template extends to |{worst}| outside the scene bound {}",
                self.scene_bound
            )));
        }
        self.template.check_finite("asset.template")?;
        self.shape_basis.check_finite("asset.shape_basis")?;
        self.pose_basis.check_finite("asset.pose_basis")?;
        self.expr_basis.check_finite("asset.expr_basis")?;
        Ok(())
    }
}

/// `positions = template + shape_basis·β + pose_basis·θ + expr_basis·ψ`.
pub fn evaluate_point_model(asset: &PointModelAsset, params: &FlameParams) -> Result<PointCloud> {
    let p = asset.point_count();
    check_dims(asset, params)?;
    let mut positions = asset.template.values().to_vec();
    accumulate_basis(&mut positions, &asset.shape_basis, &params.shape, p);
    accumulate_basis(&mut positions, &asset.pose_basis, &params.pose, p);
    accumulate_basis(&mut positions, &asset.expr_basis, &params.expr, p);
    crate::tensor::check_finite_slice("evaluate_point_model", &positions)?;
    Ok(PointCloud { positions })
}

fn check_dims(asset: &PointModelAsset, params: &FlameParams) -> Result<()> {
    for (name, got, want) in [
        ("shape", params.shape.len(), asset.shape_dim()),
        ("pose", params.pose.len(), asset.pose_dim()),
        ("expr", params.expr.len(), asset.expr_dim()),
    ] {
        if got != want {
            return Err(Error::dim("evaluate_point_model", format!("{name} length {want}"), format!("{got}")));
        }
    }
    Ok(())
}

fn accumulate_basis(positions: &mut [f64], basis: &Tensor, coeffs: &[f64], p: usize) {
    if coeffs.is_empty() {
        return;
    }
    let n = coeffs.len();
    let b = basis.values();
    for i in 0..p * 3 {
        let row = &b[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for (bv, cv) in row.iter().zip(coeffs) {
            acc += bv * cv;
        }
        positions[i] += acc;
    }
}

/// Differentiable evaluation: records the blend as linear ops so gradients
/// can flow into the coefficient leaves.
pub fn evaluate_on_tape(
    tape: &mut crate::tape::Tape,
    asset: &PointModelAsset,
    shape: crate::tape::BufId,
    pose: crate::tape::BufId,
    expr: crate::tape::BufId,
) -> Result<crate::tape::BufId> {
    let p = asset.point_count();
    let template = tape.leaf(asset.template.values().to_vec(), 1, p * 3)?;
    let mut acc = template;
    for (basis, coeffs) in [
        (&asset.shape_basis, shape),
        (&asset.pose_basis, pose),
        (&asset.expr_basis, expr),
    ] {
        let n = basis.shape()[2];
        if n == 0 {
            continue;
        }
        // Transpose [P*3, N] storage into an [N, P*3] weight matrix.
        let b = basis.values();
        let mut w = vec![0.0; n * p * 3];
        for i in 0..p * 3 {
            for j in 0..n {
                w[j * p * 3 + i] = b[i * n + j];
            }
        }
        let w = tape.leaf(w, n, p * 3)?;
        let term = tape.linear(coeffs, w, None)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

// ── toy asset generation ─────────────────────────────────────────────

pub const TOY_POINT_COUNT: usize = 642;
pub const TOY_TEMPLATE_RADIUS: f64 = 0.35;
pub const TOY_COLUMN_RMS: f64 = 0.02;

/// Deterministic toy asset: a Fibonacci sphere lattice of `p` points at
/// radius 0.35, with smooth low-frequency deformation bases normalized to a
/// per-column RMS displacement of 0.02.
pub fn make_toy_asset(seed: u64, p: usize, ns: usize, np: usize, ne: usize) -> Result<PointModelAsset> {
    if p < 4 {
        return Err(Error::contract("make_toy_asset", "need at least 4 points"));
    }
    let golden = PI * (3.0 - 5.0f64.sqrt());
    let mut template = Vec::with_capacity(p * 3);
    let mut units = Vec::with_capacity(p * 3);
    for i in 0..p {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / p as f64;
        let r = (1.0 - z * z).sqrt();
        let theta = golden * i as f64;
        let (x, y) = (r * theta.cos(), r * theta.sin());
        units.extend_from_slice(&[x, y, z]);
        template.extend_from_slice(&[
            TOY_TEMPLATE_RADIUS * x,
            TOY_TEMPLATE_RADIUS * y,
            TOY_TEMPLATE_RADIUS * z,
        ]);
    }

    let asset = PointModelAsset {
        template: Tensor::new(vec![p, 3], template)?,
        shape_basis: make_basis(seed, "shape", p, ns, &units)?,
        pose_basis: make_basis(seed, "pose", p, np, &units)?,
        expr_basis: make_basis(seed, "expr", p, ne, &units)?,
        scene_bound: 0.5,
    };
    asset.validate()?;
    Ok(asset)
}

/// One basis tensor `[P, 3, N]`: each column is a smooth deformation field
/// built from a few low-frequency directional waves over the template sphere,
/// scaled so the RMS point displacement is exactly `TOY_COLUMN_RMS`.
fn make_basis(seed: u64, label: &str, p: usize, n: usize, units: &[f64]) -> Result<Tensor> {
    let mut values = vec![0.0; p * 3 * n];
    for j in 0..n {
        let mut rng = rng::stream(seed, &format!("toy-basis-{label}-{j}"));
        // Three waves per axis: direction frequency in [-2, 2]^3, random phase.
        let mut waves = Vec::new();
        for _ in 0..9 {
            let freq = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let amp: f64 = rng.random_range(0.5..1.0);
            waves.push((freq, phase, amp));
        }
        let mut column = vec![0.0; p * 3];
        for i in 0..p {
            let u = &units[i * 3..i * 3 + 3];
            for a in 0..3 {
                let mut d = 0.0;
                for w in &waves[a * 3..a * 3 + 3] {
                    let (freq, phase, amp) = w;
                    let arg = PI * (freq[0] * u[0] + freq[1] * u[1] + freq[2] * u[2]) + phase;
                    d += amp * arg.cos();
                }
                column[i * 3 + a] = d;
            }
        }
        let mean_sq: f64 = column.chunks_exact(3).map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sum::<f64>() / p as f64;
        let scale = TOY_COLUMN_RMS / mean_sq.sqrt();
        for i in 0..p * 3 {
            values[i * n + j] = column[i] * scale;
        }
    }
    Tensor::new(vec![p, 3, n], values)
}

/// Seeded uniform subsample of the asset's points (ascending index order, so
/// point identity and ordering are preserved for the kept points).
pub fn subsample_asset(asset: &PointModelAsset, count: usize, seed: u64) -> Result<PointModelAsset> {
    let p = asset.point_count();
    if count == 0 || count > p {
        return Err(Error::contract("subsample_asset", format!("count {count} out of range 1..={p}")));
    }
    let mut rng = rng::stream(seed, "subsample");
    // Partial Fisher-Yates over indices, then sort the chosen prefix.
    let mut indices: Vec<usize> = (0..p).collect();
    for i in 0..count {
        let j = rng.random_range(i..p);
        indices.swap(i, j);
    }
    let mut keep = indices[..count].to_vec();
    keep.sort_unstable();

    let take_rows = |t: &Tensor, width: usize| -> Vec<f64> {
        let v = t.values();
        let mut out = Vec::with_capacity(count * width);
        for &i in &keep {
            out.extend_from_slice(&v[i * width..(i + 1) * width]);
        }
        out
    };
    let (ns, np, ne) = (asset.shape_dim(), asset.pose_dim(), asset.expr_dim());
    Ok(PointModelAsset {
        template: Tensor::new(vec![count, 3], take_rows(&asset.template, 3))?,
        shape_basis: Tensor::new(vec![count, 3, ns], take_rows(&asset.shape_basis, 3 * ns))?,
        pose_basis: Tensor::new(vec![count, 3, np], take_rows(&asset.pose_basis, 3 * np))?,
        expr_basis: Tensor::new(vec![count, 3, ne], take_rows(&asset.expr_basis, 3 * ne))?,
        scene_bound: asset.scene_bound,
    })
}

// ── asset file I/O ──────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct AssetFile {
    point_count: usize,
    ns: usize,
    np: usize,
    ne: usize,
    scene_bound: f64,
    /// Tensors in checkpoint framing, base64-encoded.
    blob_base64: String,
}

pub fn save_point_model(path: &Path, asset: &PointModelAsset) -> Result<()> {
    asset.validate()?;
    let entries = vec![
        ("template".to_string(), asset.template.clone()),
        ("shape_basis".to_string(), asset.shape_basis.clone()),
        ("pose_basis".to_string(), asset.pose_basis.clone()),
        ("expr_basis".to_string(), asset.expr_basis.clone()),
    ];
    let blob = checkpoint::encode(&entries)?;
    let file = AssetFile {
        point_count: asset.point_count(),
        ns: asset.shape_dim(),
        np: asset.pose_dim(),
        ne: asset.expr_dim(),
        scene_bound: asset.scene_bound,
        blob_base64: base64::engine::general_purpose::STANDARD.encode(blob),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_point_model(path: &Path) -> Result<PointModelAsset> {
    let data = std::fs::read_to_string(path)?;
    let file: AssetFile = serde_json::from_str(&data)?;
    let blob = base64::engine::general_purpose::STANDARD
        .decode(&file.blob_base64)
        .map_err(|e| Error::Parse {
            offset: 0,
            message: format!("asset blob is not valid base64: {e}"),
        })?;
    let mut entries = checkpoint::decode(&blob)?;
    let mut take = |name: &str| -> Result<Tensor> {
        let pos = entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Validation(format!("asset blob missing tensor `{name}`")))?;
        Ok(entries.remove(pos).1)
    };
    let asset = PointModelAsset {
        template: take("template")?,
        shape_basis: take("shape_basis")?,
        pose_basis: take("pose_basis")?,
        expr_basis: take("expr_basis")?,
        scene_bound: file.scene_bound,
    };
    asset.validate()?;
    let (p, ns, np, ne) = (asset.point_count(), asset.shape_dim(), asset.pose_dim(), asset.expr_dim());
    if (p, ns, np, ne) != (file.point_count, file.ns, file.np, file.ne) {
        return Err(Error::Validation(format!(
            "asset header ({}, {}, {}, {}) disagrees with tensors ({p}, {ns}, {np}, {ne})",
            file.point_count, file.ns, file.np, file.ne
        )));
    }
    Ok(asset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> PointModelAsset {
        make_toy_asset(7, 64, 4, 3, 5).unwrap()
    }

    #[test]
    fn zero_params_give_template() {
        let asset = toy();
        let cloud = evaluate_point_model(&asset, &FlameParams::zeros(&asset)).unwrap();
        assert_eq!(cloud.positions, asset.template.values());
    }

    #[test]
    fn one_hot_expression_adds_basis_column() {
        let asset = toy();
        let k = 2;
        let mut params = FlameParams::zeros(&asset);
        params.expr[k] = 1.0;
        let cloud = evaluate_point_model(&asset, &params).unwrap();
        let ne = asset.expr_dim();
        let b = asset.expr_basis.values();
        for i in 0..asset.point_count() * 3 {
            let expect = asset.template.values()[i] + b[i * ne + k];
            assert!((cloud.positions[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn random_params_match_dense_reference() {
        use rand::Rng;
        let asset = toy();
        let mut rng = rng::stream(3, "flame-oracle");
        let params = FlameParams {
            shape: (0..asset.shape_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            pose: (0..asset.pose_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            expr: (0..asset.expr_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let cloud = evaluate_point_model(&asset, &params).unwrap();
        // independent scalar reference: explicit basis-column loops
        let mut max_diff = 0.0f64;
        for i in 0..asset.point_count() {
            for a in 0..3 {
                let mut expect = asset.template.values()[i * 3 + a];
                for (basis, coeffs) in [
                    (&asset.shape_basis, &params.shape),
                    (&asset.pose_basis, &params.pose),
                    (&asset.expr_basis, &params.expr),
                ] {
                    let n = coeffs.len();
                    for j in 0..n {
                        expect += basis.values()[(i * 3 + a) * n + j] * coeffs[j];
                    }
                }
                max_diff = max_diff.max((expect - cloud.positions[i * 3 + a]).abs());
            }
        }
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn linearity_in_parameters() {
        let asset = toy();
        let t = asset.template.values();
        let (a, b) = (0.7, -1.3);
        let x = FlameParams {
            shape: (0..4).map(|i| 0.1 * i as f64).collect(),
            pose: vec![0.2; 3],
            expr: (0..5).map(|i| -0.3 + 0.2 * i as f64).collect(),
        };
        let y = FlameParams {
            shape: (0..4).map(|i| 0.05 * (4 - i) as f64).collect(),
            pose: vec![-0.1; 3],
            expr: (0..5).map(|i| 0.4 - 0.1 * i as f64).collect(),
        };
        let combo = FlameParams {
            shape: x.shape.iter().zip(&y.shape).map(|(u, v)| a * u + b * v).collect(),
            pose: x.pose.iter().zip(&y.pose).map(|(u, v)| a * u + b * v).collect(),
            expr: x.expr.iter().zip(&y.expr).map(|(u, v)| a * u + b * v).collect(),
        };
        let ex = evaluate_point_model(&asset, &x).unwrap();
        let ey = evaluate_point_model(&asset, &y).unwrap();
        let ec = evaluate_point_model(&asset, &combo).unwrap();
        for i in 0..t.len() {
            let lhs = ec.positions[i] - t[i];
            let rhs = a * (ex.positions[i] - t[i]) + b * (ey.positions[i] - t[i]);
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn identity_is_stable_under_small_perturbations() {
        let asset = toy();
        let base = evaluate_point_model(&asset, &FlameParams::zeros(&asset)).unwrap();
        let eps = 1e-4;
        let mut params = FlameParams::zeros(&asset);
        params.expr[0] = eps;
        let moved = evaluate_point_model(&asset, &params).unwrap();
        // every point moves O(eps); ordering never permutes (same index maps
        // to a nearby position)
        for i in 0..asset.point_count() {
            let d = dist(base.point(i), moved.point(i));
            assert!(d < 10.0 * eps, "point {i} jumped {d}");
        }
    }

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    #[test]
    fn toy_asset_is_deterministic() {
        let a = make_toy_asset(9, 128, 8, 6, 10).unwrap();
        let b = make_toy_asset(9, 128, 8, 6, 10).unwrap();
        assert_eq!(a.template.values(), b.template.values());
        assert_eq!(a.expr_basis.values(), b.expr_basis.values());
    }

    #[test]
    fn basis_columns_have_exact_rms() {
        let asset = make_toy_asset(1, 200, 3, 2, 4).unwrap();
        let p = asset.point_count();
        for (basis, n) in [
            (&asset.shape_basis, asset.shape_dim()),
            (&asset.expr_basis, asset.expr_dim()),
        ] {
            for j in 0..n {
                let mut mean_sq = 0.0;
                for i in 0..p {
                    let v = basis.values();
                    let (x, y, z) = (v[(i * 3) * n + j], v[(i * 3 + 1) * n + j], v[(i * 3 + 2) * n + j]);
                    mean_sq += x * x + y * y + z * z;
                }
                let rms = (mean_sq / p as f64).sqrt();
                assert!((rms - TOY_COLUMN_RMS).abs() < 1e-9, "column {j} rms {rms}");
            }
        }
    }

    #[test]
    fn all_ones_expression_bounded_by_column_amplitudes() {
        let asset = toy();
        let ne = asset.expr_dim();
        let params = FlameParams::expression(&asset, vec![1.0; ne]);
        let cloud = evaluate_point_model(&asset, &params).unwrap();
        // per-column max displacement over points
        let mut col_max = vec![0.0f64; ne];
        let b = asset.expr_basis.values();
        for i in 0..asset.point_count() {
            for (j, cm) in col_max.iter_mut().enumerate() {
                let (x, y, z) = (b[(i * 3) * ne + j], b[(i * 3 + 1) * ne + j], b[(i * 3 + 2) * ne + j]);
                *cm = cm.max((x * x + y * y + z * z).sqrt());
            }
        }
        let bound: f64 = col_max.iter().sum();
        for i in 0..asset.point_count() {
            let d = dist(cloud.point(i), [
                asset.template.values()[i * 3],
                asset.template.values()[i * 3 + 1],
                asset.template.values()[i * 3 + 2],
            ]);
            assert!(d <= bound + 1e-12, "point {i} displaced {d} > {bound}");
        }
    }

    #[test]
    fn file_round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("asset.json");
        let asset = toy();
        save_point_model(&path, &asset).unwrap();
        let back = load_point_model(&path).unwrap();
        assert_eq!(asset.template.values(), back.template.values());
        assert_eq!(asset.shape_basis.values(), back.shape_basis.values());
        assert_eq!(asset.pose_basis.values(), back.pose_basis.values());
        assert_eq!(asset.expr_basis.values(), back.expr_basis.values());
        assert_eq!(asset.scene_bound, back.scene_bound);
    }

    #[test]
    fn truncated_blob_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("asset.json");
        save_point_model(&path, &toy()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut file: serde_json::Value = serde_json::from_str(&text).unwrap();
        let blob = file["blob_base64"].as_str().unwrap().to_string();
        let decoded = base64::engine::general_purpose::STANDARD.decode(&blob).unwrap();
        let cut = base64::engine::general_purpose::STANDARD.encode(&decoded[..decoded.len() - 16]);
        file["blob_base64"] = serde_json::Value::String(cut);
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        let err = load_point_model(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte"), "{msg}");
    }

    #[test]
    fn out_of_bound_template_rejected() {
        let mut asset = toy();
        asset.template.values_mut()[0] = 0.9; // outside bound 0.5
        assert!(asset.validate().is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let asset = toy();
        let mut params = FlameParams::zeros(&asset);
        params.expr.push(0.0);
        assert!(evaluate_point_model(&asset, &params).is_err());
    }

    #[test]
    fn subsample_preserves_order_and_rows() {
        let asset = toy();
        let sub = subsample_asset(&asset, 20, 5).unwrap();
        assert_eq!(sub.point_count(), 20);
        // every row of the subsample exists in the original, in ascending order
        let orig = asset.template.values();
        let mut last_found = 0usize;
        for i in 0..20 {
            let row = &sub.template.values()[i * 3..i * 3 + 3];
            let found = (last_found..asset.point_count())
                .find(|&j| &orig[j * 3..j * 3 + 3] == row)
                .expect("row not found in order");
            last_found = found + 1;
        }
        let again = subsample_asset(&asset, 20, 5).unwrap();
        assert_eq!(sub.template.values(), again.template.values());
    }

    #[test]
    fn tape_evaluation_matches_plain() {
        use crate::tape::Tape;
        let asset = toy();
        let params = FlameParams {
            shape: (0..4).map(|i| 0.3 - 0.1 * i as f64).collect(),
            pose: vec![0.15, -0.2, 0.05],
            expr: (0..5).map(|i| 0.1 * i as f64 - 0.2).collect(),
        };
        let plain = evaluate_point_model(&asset, &params).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf_param(params.shape.clone(), 1, 4).unwrap();
        let p = tape.leaf_param(params.pose.clone(), 1, 3).unwrap();
        let e = tape.leaf_param(params.expr.clone(), 1, 5).unwrap();
        let out = evaluate_on_tape(&mut tape, &asset, s, p, e).unwrap();
        for (a, b) in tape.value(out).iter().zip(&plain.positions) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
