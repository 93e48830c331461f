//! Model assembly: every trainable tensor of the pipeline registered as a
//! named parameter, with seeded initialization and checkpoint round-trips.
//!
//! Dimension chain at assembly: tri-plane and expression features are 32
//! channels each, concatenated to 64, mapped by the trunk to 128, and split
//! into a density scalar and a 32-channel feature vector; the upsampler maps
//! 32 feature channels to 3·s² RGB subpixels.

use std::path::Path;

use rand::Rng;

use crate::adam::AdamState;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::expr_field::ExprFieldConfig;
use crate::params::{ParamId, ParamSet};
use crate::points::PointModelAsset;
use crate::render::{FEATURE_DIM, FEATURE_HIDDEN, FUSED_DIM, TRUNK_DIM};
use crate::rng;
use crate::tensor::Tensor;

pub const FEATURE_CHANNELS: usize = 32;

/// Structural configuration of the model (profile constants plus ablation
/// switches).
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub expr_field: ExprFieldConfig,
    pub triplane_resolution: usize,
    pub triplane_init_scale: f64,
    pub scene_bound: f64,
    pub source_slots: usize,
    pub low_h: usize,
    pub low_w: usize,
    pub upsample_factor: usize,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    /// Rays per checkpointed render chunk when `memory_saver` is on.
    pub chunk_rays: usize,
    pub memory_saver: bool,
    /// Ablation: zero the expression branch entirely.
    pub disable_expr_field: bool,
    /// Diagnostic: evaluate the cloud at zero parameters regardless of the
    /// requested expression.
    pub freeze_cloud: bool,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            expr_field: ExprFieldConfig::default(),
            triplane_resolution: 64,
            triplane_init_scale: 0.05,
            scene_bound: 0.5,
            source_slots: 2,
            low_h: 32,
            low_w: 32,
            upsample_factor: 4,
            coarse_samples: 24,
            fine_samples: 16,
            chunk_rays: 128,
            memory_saver: false,
            disable_expr_field: false,
            freeze_cloud: false,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            triplane_resolution: 256,
            low_h: 128,
            low_w: 128,
            coarse_samples: 48,
            fine_samples: 48,
            memory_saver: true,
            ..ModelConfig::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.expr_field.validate()?;
        if self.expr_field.channels != FEATURE_CHANNELS || self.expr_field.hidden != FEATURE_CHANNELS {
            return Err(Error::Validation("expression field widths must be 32".into()));
        }
        if self.source_slots == 0 {
            return Err(Error::Validation("need at least one source slot".into()));
        }
        if self.upsample_factor != 4 {
            return Err(Error::Validation("upsample factor is fixed at 4".into()));
        }
        if self.coarse_samples < 2 {
            return Err(Error::Validation("need at least 2 coarse samples".into()));
        }
        if self.low_h % 4 != 0 || self.low_w % 4 != 0 {
            return Err(Error::Validation("render size must be divisible by 4".into()));
        }
        if self.scene_bound <= 0.0 || self.triplane_resolution < 2 || self.chunk_rays == 0 {
            return Err(Error::Validation("bad profile constants".into()));
        }
        Ok(())
    }
}

/// Parameter indices in registration order (also the checkpoint order).
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub table: usize,
    pub pef_l1_w: usize,
    pub pef_l1_b: usize,
    pub pef_l2_w: usize,
    pub pef_l2_b: usize,
    pub planes: Vec<usize>,
    pub query: usize,
    pub lq_w: usize,
    pub lq_b: usize,
    pub lk_w: usize,
    pub lk_b: usize,
    pub trunk1_w: usize,
    pub trunk1_b: usize,
    pub trunk2_w: usize,
    pub trunk2_b: usize,
    pub trunk3_w: usize,
    pub trunk3_b: usize,
    pub density_w: usize,
    pub density_b: usize,
    pub feat1_w: usize,
    pub feat1_b: usize,
    pub feat2_w: usize,
    pub feat2_b: usize,
    pub upsample_w: usize,
    pub upsample_b: usize,
    pub background: usize,
}

#[derive(Debug, Clone)]
pub struct AvatarModel {
    pub asset: PointModelAsset,
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub layout: ParamLayout,
}

fn linear_init(rng_seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
    let mut rng = rng::stream(rng_seed, &format!("init.{name}"));
    let scale = (1.0 / fan_in as f64).sqrt();
    Tensor::new(
        vec![fan_in, fan_out],
        (0..fan_in * fan_out).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("shape consistent")
}

impl AvatarModel {
    pub fn new(asset: PointModelAsset, cfg: ModelConfig, seed: u64) -> Result<AvatarModel> {
        cfg.validate()?;
        asset.validate()?;
        if (asset.scene_bound - cfg.scene_bound).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "asset scene bound {} disagrees with profile {}",
                asset.scene_bound, cfg.scene_bound
            )));
        }
        let p = asset.point_count();
        let c = FEATURE_CHANNELS;
        let r = cfg.triplane_resolution;
        let s = cfg.upsample_factor;
        let din = cfg.expr_field.input_dim();

        let mut params = ParamSet::new();
        let mut table_rng = rng::stream(seed, "init.table");
        let table = Tensor::new(
            vec![p, c],
            (0..p * c).map(|_| table_rng.random_range(-0.05..0.05)).collect(),
        )?;
        let mut add = |params: &mut ParamSet, name: &str, t: Tensor| -> Result<usize> {
            Ok(params.add(name, t)?.0)
        };

        let table = add(&mut params, "pef.table", table)?;
        let pef_l1_w = add(&mut params, "pef.l1.w", linear_init(seed, "pef.l1.w", din, c))?;
        let pef_l1_b = add(&mut params, "pef.l1.b", Tensor::zeros(vec![c]))?;
        let pef_l2_w = add(&mut params, "pef.l2.w", linear_init(seed, "pef.l2.w", c, c))?;
        let pef_l2_b = add(&mut params, "pef.l2.b", Tensor::zeros(vec![c]))?;

        let mut planes = Vec::with_capacity(cfg.source_slots);
        for i in 0..cfg.source_slots {
            let tp = crate::triplane::init_triplanes(
                rng::derive(seed, "init.planes", i as u64),
                c,
                r,
                cfg.triplane_init_scale,
                cfg.scene_bound,
            )?;
            planes.push(add(&mut params, &format!("planes.src{i}"), tp.planes)?);
        }
        let query_tp = crate::triplane::init_triplanes(
            rng::derive(seed, "init.query", 0),
            c,
            r,
            cfg.triplane_init_scale,
            cfg.scene_bound,
        )?;
        let query = add(&mut params, "mta.query", query_tp.planes)?;
        let lq_w = add(&mut params, "mta.lq.w", linear_init(seed, "mta.lq.w", c, c))?;
        let lq_b = add(&mut params, "mta.lq.b", Tensor::zeros(vec![c]))?;
        let lk_w = add(&mut params, "mta.lk.w", linear_init(seed, "mta.lk.w", c, c))?;
        let lk_b = add(&mut params, "mta.lk.b", Tensor::zeros(vec![c]))?;

        let trunk1_w = add(&mut params, "trunk.l1.w", linear_init(seed, "trunk.l1.w", FUSED_DIM, TRUNK_DIM))?;
        let trunk1_b = add(&mut params, "trunk.l1.b", Tensor::zeros(vec![TRUNK_DIM]))?;
        let trunk2_w = add(&mut params, "trunk.l2.w", linear_init(seed, "trunk.l2.w", TRUNK_DIM, TRUNK_DIM))?;
        let trunk2_b = add(&mut params, "trunk.l2.b", Tensor::zeros(vec![TRUNK_DIM]))?;
        let trunk3_w = add(&mut params, "trunk.l3.w", linear_init(seed, "trunk.l3.w", TRUNK_DIM, TRUNK_DIM))?;
        let trunk3_b = add(&mut params, "trunk.l3.b", Tensor::zeros(vec![TRUNK_DIM]))?;
        let density_w = add(&mut params, "head.density.w", linear_init(seed, "head.density.w", TRUNK_DIM, 1))?;
        let density_b = add(&mut params, "head.density.b", Tensor::zeros(vec![1]))?;
        let feat1_w = add(&mut params, "head.feat.l1.w", linear_init(seed, "head.feat.l1.w", TRUNK_DIM, FEATURE_HIDDEN))?;
        let feat1_b = add(&mut params, "head.feat.l1.b", Tensor::zeros(vec![FEATURE_HIDDEN]))?;
        let feat2_w = add(&mut params, "head.feat.l2.w", linear_init(seed, "head.feat.l2.w", FEATURE_HIDDEN, FEATURE_DIM))?;
        let feat2_b = add(&mut params, "head.feat.l2.b", Tensor::zeros(vec![FEATURE_DIM]))?;
        let upsample_w = add(&mut params, "upsample.w", linear_init(seed, "upsample.w", c, 3 * s * s))?;
        let upsample_b = add(&mut params, "upsample.b", Tensor::zeros(vec![3 * s * s]))?;
        let background = add(&mut params, "background", Tensor::zeros(vec![c]))?;

        let layout = ParamLayout {
            table,
            pef_l1_w,
            pef_l1_b,
            pef_l2_w,
            pef_l2_b,
            planes,
            query,
            lq_w,
            lq_b,
            lk_w,
            lk_b,
            trunk1_w,
            trunk1_b,
            trunk2_w,
            trunk2_b,
            trunk3_w,
            trunk3_b,
            density_w,
            density_b,
            feat1_w,
            feat1_b,
            feat2_w,
            feat2_b,
            upsample_w,
            upsample_b,
            background,
        };
        Ok(AvatarModel { asset, cfg, params, layout })
    }

    /// Named tensors in checkpoint order, optionally with optimizer state.
    pub fn checkpoint_entries(&self, adam: Option<&AdamState>) -> Vec<(String, Tensor)> {
        let mut entries: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect();
        if let Some(adam) = adam {
            for (i, p) in self.params.iter().enumerate() {
                let (m, v) = adam.moments(i);
                entries.push((format!("adam.m.{}", p.name), m.clone()));
                entries.push((format!("adam.v.{}", p.name), v.clone()));
            }
            entries.push(("adam.step".to_string(), Tensor::scalar(adam.step as f64)));
        }
        entries
    }

    pub fn save_checkpoint(&self, path: &Path, adam: Option<&AdamState>) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_entries(adam))
    }

    /// Load parameter tensors (and optimizer state if present) from a
    /// checkpoint. Tensor shapes must match the assembled model.
    pub fn load_checkpoint(&mut self, path: &Path, adam: Option<&mut AdamState>) -> Result<()> {
        let entries = checkpoint::load(path)?;
        let find = |name: &str| -> Option<&Tensor> {
            entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
        };
        for i in 0..self.params.len() {
            let id = ParamId(i);
            let name = self.params.get(id).name.clone();
            let t = find(&name).ok_or_else(|| Error::Validation(format!("checkpoint missing tensor `{name}`")))?;
            if t.shape() != self.params.get(id).tensor.shape() {
                return Err(Error::dim(
                    "load_checkpoint",
                    format!("{name} {:?}", self.params.get(id).tensor.shape()),
                    format!("{:?}", t.shape()),
                ));
            }
            self.params.get_mut(id).tensor = t.clone();
        }
        if let Some(adam) = adam {
            let step = find("adam.step").ok_or_else(|| Error::Validation("checkpoint has no optimizer state".into()))?;
            adam.step = step.values()[0] as u64;
            for i in 0..self.params.len() {
                let name = self.params.get(ParamId(i)).name.clone();
                let m = find(&format!("adam.m.{name}")).ok_or_else(|| Error::Validation(format!("missing adam.m.{name}")))?.clone();
                let v = find(&format!("adam.v.{name}")).ok_or_else(|| Error::Validation(format!("missing adam.v.{name}")))?.clone();
                let (ms, vs) = adam.moments_mut(i);
                *ms = m;
                *vs = v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::points::make_toy_asset;

    fn small_model() -> AvatarModel {
        let asset = make_toy_asset(7, 64, 4, 3, 5).unwrap();
        let cfg = ModelConfig {
            triplane_resolution: 8,
            low_h: 8,
            low_w: 8,
            coarse_samples: 4,
            fine_samples: 2,
            ..ModelConfig::toy()
        };
        AvatarModel::new(asset, cfg, 42).unwrap()
    }

    #[test]
    fn dimension_chain_holds_at_assembly() {
        let m = small_model();
        let by = |n: &str| m.params.by_name(n).unwrap().tensor.shape().to_vec();
        assert_eq!(by("pef.table"), vec![64, 32]);
        assert_eq!(by("pef.l1.w"), vec![71, 32]);
        assert_eq!(by("trunk.l1.w"), vec![64, 128]);
        assert_eq!(by("trunk.l3.w"), vec![128, 128]);
        assert_eq!(by("head.density.w"), vec![128, 1]);
        assert_eq!(by("head.feat.l2.w"), vec![64, 32]);
        assert_eq!(by("upsample.w"), vec![32, 48]);
        assert_eq!(by("background"), vec![32]);
        assert_eq!(by("planes.src0"), vec![3, 8, 8, 32]);
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = small_model();
        let asset = make_toy_asset(7, 64, 4, 3, 5).unwrap();
        let b = AvatarModel::new(asset, a.cfg.clone(), 42).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.tensor.values(), pb.tensor.values(), "{}", pa.name);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut m = small_model();
        let adam = AdamState::new(&m.params, 1e-4);
        m.save_checkpoint(&path, Some(&adam)).unwrap();
        let before = checkpoint::encode(&m.checkpoint_entries(Some(&adam))).unwrap();

        // perturb, reload, compare
        for p in m.params.iter_mut() {
            for v in p.tensor.values_mut() {
                *v += 1.0;
            }
        }
        let mut adam2 = AdamState::new(&m.params, 1e-4);
        m.load_checkpoint(&path, Some(&mut adam2)).unwrap();
        let after = checkpoint::encode(&m.checkpoint_entries(Some(&adam2))).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn mismatched_bound_rejected() {
        let asset = make_toy_asset(7, 64, 4, 3, 5).unwrap();
        let cfg = ModelConfig { scene_bound: 0.7, ..small_model().cfg };
        assert!(AvatarModel::new(asset, cfg, 0).is_err());
    }
}
