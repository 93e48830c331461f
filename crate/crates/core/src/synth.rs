//! Synthetic dataset generation: toy asset, analytic scene, camera rig, and
//! oracle-rendered target images with a train/holdout manifest.

use std::path::Path;

use crate::camera::Camera;
use crate::error::Result;
use crate::model::ModelConfig;
use crate::oracle::{render_oracle_image, AnalyticScene};
use crate::pipeline::{Manifest, ManifestEntry, Role};
use crate::points::{make_toy_asset, FlameParams, PointModelAsset};
use crate::rng;

/// Scale a camera's intrinsics to a higher-resolution grid with the same
/// field of view.
pub fn scale_camera(camera: &Camera, s: usize) -> Camera {
    Camera {
        fx: camera.fx * s as f64,
        fy: camera.fy * s as f64,
        cx: camera.cx * s as f64,
        cy: camera.cy * s as f64,
        ..camera.clone()
    }
}

/// Camera ring: `count` viewpoints at distance 1.3 looking at the origin,
/// azimuths evenly spaced, elevations alternating ±0.26 rad. Intrinsics are
/// for the low-resolution grid (`low × low` pixels).
pub fn camera_ring(count: usize, low: usize) -> Result<Vec<Camera>> {
    let mut cams = Vec::with_capacity(count);
    let distance = 1.3;
    let fov_half = (0.5f64 / distance).atan();
    let f = (low as f64 / 2.0) / fov_half.tan();
    for k in 0..count {
        let az = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
        let el: f64 = if k % 2 == 0 { 0.26 } else { -0.26 };
        let eye = [
            distance * el.cos() * az.sin(),
            distance * el.sin(),
            -distance * el.cos() * az.cos(),
        ];
        cams.push(Camera::look_at(
            eye,
            [0.0; 3],
            [0.0, 1.0, 0.0],
            f,
            f,
            low as f64 / 2.0,
            low as f64 / 2.0,
            distance - 0.6,
            distance + 0.6,
        )?);
    }
    Ok(cams)
}

/// The three expression vectors of the toy dataset.
pub fn toy_expressions(asset: &PointModelAsset) -> Vec<FlameParams> {
    let ne = asset.expr_dim();
    let mut e1 = vec![0.0; ne];
    e1[0] = 1.8;
    if ne > 1 {
        e1[1] = -0.7;
    }
    let mut e2 = vec![0.0; ne];
    e2[0] = -1.5;
    if ne > 2 {
        e2[2] = 1.0;
    }
    vec![
        FlameParams::expression(asset, vec![0.0; ne]),
        FlameParams::expression(asset, e1),
        FlameParams::expression(asset, e2),
    ]
}

pub struct SynthOptions {
    pub seed: u64,
    pub views: usize,
    pub holdout_views: usize,
    pub point_count: usize,
    pub low_res: usize,
    pub upsample: usize,
    pub oracle_samples: usize,
}

impl SynthOptions {
    pub fn toy(seed: u64) -> Self {
        SynthOptions {
            seed,
            views: 10,
            holdout_views: 2,
            point_count: 642,
            low_res: 32,
            upsample: 4,
            oracle_samples: 512,
        }
    }

    pub fn for_profile(cfg: &ModelConfig, seed: u64) -> Self {
        SynthOptions {
            low_res: cfg.low_h,
            upsample: cfg.upsample_factor,
            ..SynthOptions::toy(seed)
        }
    }
}

/// Generate the dataset (asset, scene, targets, manifest) into `out_dir`.
/// The last `holdout_views` viewpoints are marked as holdout across all
/// expressions. Returns the manifest.
pub fn synth_dataset(out_dir: &Path, opts: &SynthOptions) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir.join("targets"))?;
    let asset = make_toy_asset(rng::derive(opts.seed, "asset", 0), opts.point_count, 8, 6, 10)?;
    let scene = AnalyticScene::toy(&asset);
    crate::points::save_point_model(&out_dir.join("asset.json"), &asset)?;
    crate::oracle::save_scene(&out_dir.join("scene.json"), &scene)?;

    let cams = camera_ring(opts.views, opts.low_res)?;
    let expressions = toy_expressions(&asset);
    let hr = opts.low_res * opts.upsample;
    let mut entries = Vec::new();
    for (vi, cam) in cams.iter().enumerate() {
        let role = if vi >= opts.views - opts.holdout_views {
            Role::Holdout
        } else {
            Role::Train
        };
        for (ei, flame) in expressions.iter().enumerate() {
            let target = render_oracle_image(
                &scene,
                &asset,
                &scale_camera(cam, opts.upsample),
                flame,
                hr,
                hr,
                opts.oracle_samples,
            )?;
            let file = format!("targets/v{vi:02}_e{ei}.ppm");
            crate::image_io::write_ppm(&target, &out_dir.join(&file))?;
            entries.push(ManifestEntry {
                camera: cam.clone(),
                flame: flame.clone(),
                file,
                role: role.clone(),
            });
        }
    }
    let manifest = Manifest {
        asset: "asset.json".to_string(),
        scene: "scene.json".to_string(),
        entries,
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
