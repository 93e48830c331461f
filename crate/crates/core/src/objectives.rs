//! Training objectives and evaluation metrics.
//!
//! Reconstruction combines per-pixel mean L1 terms on the low- and
//! high-resolution outputs with a weighted perceptual term; the perceptual
//! proxy is the L1 distance between 3-level average-pool pyramids (factors
//! 1, 2, 4), deterministic and free of learned weights, behind the same
//! interface a pretrained feature network would use. The density norm is the
//! batch L2 norm of all sampled densities divided by √count, so its scale is
//! stable across batch sizes. The overall objective is the exact linear
//! combination `lambda_rec * rec + lambda_norm * norm`.

use crate::error::{Error, Result};
use crate::image_io::{area_downsample, RgbImage};
use crate::tape::{BufId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_perc: f64,
    pub lambda_norm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 1.0,
            lambda_perc: 0.1,
            lambda_norm: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_perc", self.lambda_perc),
            ("lambda_norm", self.lambda_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be a nonnegative finite real, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar decomposition of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l1_lr: f64,
    pub l1_hr: f64,
    pub perc_lr: f64,
    pub perc_hr: f64,
    pub rec: f64,
    pub norm: f64,
    pub overall: f64,
}

/// Mean absolute error between a prediction node and a constant target.
pub fn l1_on_tape(tape: &mut Tape, pred: BufId, target: &[f64]) -> Result<BufId> {
    let t = tape.leaf(target.to_vec(), tape.rows(pred), tape.cols(pred))?;
    let diff = tape.sub(pred, t)?;
    let a = tape.abs(diff)?;
    tape.mean_all(a)
}

/// Perceptual proxy: mean of the per-level L1 distances between 3-level
/// average-pool pyramids (factors 1, 2, 4). `h`, `w` describe `pred`'s image
/// layout (rows = h·w) and must stay even through two halvings.
pub fn perceptual_on_tape(tape: &mut Tape, pred: BufId, target: &[f64], h: usize, w: usize) -> Result<BufId> {
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::contract("perceptual_proxy", format!("image {h}x{w} must be divisible by 4")));
    }
    let t0 = tape.leaf(target.to_vec(), tape.rows(pred), tape.cols(pred))?;
    let mut levels = Vec::with_capacity(3);
    let (mut p, mut t) = (pred, t0);
    let (mut lh, mut lw) = (h, w);
    for level in 0..3 {
        if level > 0 {
            p = tape.avg_pool2(p, lh, lw)?;
            t = tape.avg_pool2(t, lh, lw)?;
            lh /= 2;
            lw /= 2;
        }
        let diff = tape.sub(p, t)?;
        let a = tape.abs(diff)?;
        levels.push(tape.mean_all(a)?);
    }
    let s01 = tape.add(levels[0], levels[1])?;
    let s = tape.add(s01, levels[2])?;
    tape.scale(s, 1.0 / 3.0)
}

/// Batch density norm: `||d||_2 / sqrt(count)`.
pub fn density_norm_on_tape(tape: &mut Tape, densities: BufId) -> Result<BufId> {
    let n = tape.rows(densities) * tape.cols(densities);
    let sq = tape.mul(densities, densities)?;
    let total = tape.sum_all(sq)?;
    let root = tape.sqrt(total)?;
    tape.scale(root, 1.0 / (n as f64).sqrt())
}

/// Full objective on the tape. `low_rgb` is the RGB slice of the feature
/// image (`[h*w, 3]`), `high` the upsampled image (`[H*W, 3]`), `target` the
/// full-resolution target; the low branch compares against its area-average
/// downsample. Returns the report and the scalar root node.
#[allow(clippy::too_many_arguments)]
pub fn overall_loss_on_tape(
    tape: &mut Tape,
    low_rgb: BufId,
    high: BufId,
    densities: BufId,
    target: &RgbImage,
    low_h: usize,
    low_w: usize,
    weights: &LossWeights,
) -> Result<(LossReport, BufId)> {
    weights.validate()?;
    if tape.rows(high) != target.h * target.w || tape.cols(high) != 3 {
        return Err(Error::dim(
            "rec_loss",
            format!("high-res {}x{}x3", target.h, target.w),
            format!("{}x{}", tape.rows(high), tape.cols(high)),
        ));
    }
    if target.h % low_h != 0 || target.w % low_w != 0 || target.h / low_h != target.w / low_w {
        return Err(Error::contract(
            "rec_loss",
            format!("target {}x{} is not an integer multiple of low-res {low_h}x{low_w}", target.h, target.w),
        ));
    }
    let factor = target.h / low_h;
    let low_target = area_downsample(target, factor)?;

    let l1_lr = l1_on_tape(tape, low_rgb, &low_target.data)?;
    let l1_hr = l1_on_tape(tape, high, &target.data)?;
    let perc_lr = perceptual_on_tape(tape, low_rgb, &low_target.data, low_h, low_w)?;
    let perc_hr = perceptual_on_tape(tape, high, &target.data, target.h, target.w)?;

    let perc_sum = tape.add(perc_lr, perc_hr)?;
    let perc_term = tape.scale(perc_sum, weights.lambda_perc)?;
    let l1_sum = tape.add(l1_lr, l1_hr)?;
    let rec = tape.add(l1_sum, perc_term)?;

    let norm = density_norm_on_tape(tape, densities)?;
    let rec_term = tape.scale(rec, weights.lambda_rec)?;
    let norm_term = tape.scale(norm, weights.lambda_norm)?;
    let overall = tape.add(rec_term, norm_term)?;

    let report = LossReport {
        l1_lr: tape.scalar_value(l1_lr),
        l1_hr: tape.scalar_value(l1_hr),
        perc_lr: tape.scalar_value(perc_lr),
        perc_hr: tape.scalar_value(perc_hr),
        rec: tape.scalar_value(rec),
        norm: tape.scalar_value(norm),
        overall: tape.scalar_value(overall),
    };
    Ok((report, overall))
}

// ── plain evaluation metrics ─────────────────────────────────────────

/// Mean absolute error between two images of equal resolution.
pub fn l1_metric(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b, "l1")?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB for values in [0, 1], capped at 99.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b, "psnr")?;
    let mse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse < 1e-10 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

/// Structural similarity with 8×8 uniform windows at stride 1, K1 = 0.01,
/// K2 = 0.03, dynamic range 1; averaged over channels and window positions.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b, "ssim")?;
    const WIN: usize = 8;
    if a.h < WIN || a.w < WIN {
        return Err(Error::contract("ssim", format!("image {}x{} smaller than the 8x8 window", a.h, a.w)));
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let n = (WIN * WIN) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..3 {
        for i in 0..=a.h - WIN {
            for j in 0..=a.w - WIN {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..WIN {
                    for dj in 0..WIN {
                        let at = ((i + di) * a.w + (j + dj)) * 3 + ch;
                        let (x, y) = (a.data[at], b.data[at]);
                        sx += x;
                        sy += y;
                        sxx += x * x;
                        syy += y * y;
                        sxy += x * y;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cov = sxy / n - mx * my;
                let score = ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += score;
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

fn check_same(a: &RgbImage, b: &RgbImage, ctx: &'static str) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::dim(ctx, format!("{}x{}", a.h, a.w), format!("{}x{}", b.h, b.w)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = rng::stream(seed, "obj-image");
        RgbImage::new(h, w, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn run_rec(low: &RgbImage, high: &RgbImage, target: &RgbImage, densities: &[f64], weights: &LossWeights) -> LossReport {
        let mut tape = Tape::new();
        let low_rgb = tape.leaf_param(low.data.clone(), low.h * low.w, 3).unwrap();
        let high_b = tape.leaf_param(high.data.clone(), high.h * high.w, 3).unwrap();
        let d = tape.leaf_param(densities.to_vec(), densities.len(), 1).unwrap();
        let (report, _) = overall_loss_on_tape(&mut tape, low_rgb, high_b, d, target, low.h, low.w, weights).unwrap();
        report
    }

    #[test]
    fn exact_match_gives_zero_rec() {
        let target = random_image(16, 16, 1);
        let low = area_downsample(&target, 4).unwrap();
        let report = run_rec(&low, &target, &target, &[0.5], &LossWeights::default());
        assert_eq!(report.l1_lr, 0.0);
        assert_eq!(report.l1_hr, 0.0);
        assert_eq!(report.perc_lr, 0.0);
        assert_eq!(report.perc_hr, 0.0);
        assert_eq!(report.rec, 0.0);
    }

    #[test]
    fn uniform_offset_gives_that_l1() {
        let target = random_image(16, 16, 2);
        let low = area_downsample(&target, 4).unwrap();
        let mut high = target.clone();
        for v in high.data.iter_mut() {
            *v = (*v + 0.1).min(1.0);
        }
        // keep the offset exact: rebuild without clamping artifacts
        let target2 = RgbImage::new(16, 16, target.data.iter().map(|v| v * 0.8).collect()).unwrap();
        let low2 = area_downsample(&target2, 4).unwrap();
        let high2 = RgbImage::new(16, 16, target2.data.iter().map(|v| v + 0.1).collect()).unwrap();
        let report = run_rec(&low2, &high2, &target2, &[0.0], &LossWeights { lambda_perc: 0.0, ..Default::default() });
        assert!((report.l1_hr - 0.1).abs() < 1e-12, "{}", report.l1_hr);
        assert_eq!(report.l1_lr, 0.0);
        assert!((report.rec - 0.1).abs() < 1e-12);
        let _ = (low, high);
    }

    #[test]
    fn rec_matches_scalar_reference_on_random_images() {
        let target = random_image(16, 16, 3);
        let low = random_image(4, 4, 4);
        let high = random_image(16, 16, 5);
        let weights = LossWeights { lambda_rec: 1.0, lambda_perc: 0.37, lambda_norm: 0.0 };
        let report = run_rec(&low, &high, &target, &[0.0], &weights);

        // scalar reference
        let low_t = area_downsample(&target, 4).unwrap();
        let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        let pool = |img: &RgbImage| area_downsample(img, 2).unwrap();
        let pyramid = |a: &RgbImage, b: &RgbImage| {
            let (a1, b1) = (pool(a), pool(b));
            let (a2, b2) = (pool(&a1), pool(&b1));
            (l1(&a.data, &b.data) + l1(&a1.data, &b1.data) + l1(&a2.data, &b2.data)) / 3.0
        };
        let expect_l1_lr = l1(&low.data, &low_t.data);
        let expect_l1_hr = l1(&high.data, &target.data);
        let expect_perc_lr = pyramid(&low, &low_t);
        let expect_perc_hr = pyramid(&high, &target);
        let expect_rec = expect_l1_lr + expect_l1_hr + 0.37 * (expect_perc_lr + expect_perc_hr);
        assert!((report.l1_lr - expect_l1_lr).abs() < 1e-12);
        assert!((report.l1_hr - expect_l1_hr).abs() < 1e-12);
        assert!((report.perc_lr - expect_perc_lr).abs() < 1e-12);
        assert!((report.perc_hr - expect_perc_hr).abs() < 1e-12);
        assert!((report.rec - expect_rec).abs() < 1e-12);
    }

    #[test]
    fn perceptual_identical_zero_constant_offset_c() {
        let a = random_image(8, 8, 6);
        let mut tape = Tape::new();
        let p = tape.leaf(a.data.clone(), 64, 3).unwrap();
        let zero = perceptual_on_tape(&mut tape, p, &a.data, 8, 8).unwrap();
        assert_eq!(tape.scalar_value(zero), 0.0);
        // constant offset c shows up at every level
        let c = 0.23;
        let shifted: Vec<f64> = a.data.iter().map(|v| v + c).collect();
        let p2 = tape.leaf(shifted, 64, 3).unwrap();
        let l = perceptual_on_tape(&mut tape, p2, &a.data, 8, 8).unwrap();
        assert!((tape.scalar_value(l) - c).abs() < 1e-12);
    }

    #[test]
    fn density_norm_closed_forms() {
        let mut tape = Tape::new();
        let z = tape.leaf_param(vec![0.0; 4], 4, 1).unwrap();
        let n0 = density_norm_on_tape(&mut tape, z).unwrap();
        assert_eq!(tape.scalar_value(n0), 0.0);
        let d = tape.leaf_param(vec![3.0, 4.0], 2, 1).unwrap();
        let n = density_norm_on_tape(&mut tape, d).unwrap();
        assert!((tape.scalar_value(n) - 5.0 / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn density_norm_gradients_away_from_zero() {
        use crate::params::ParamSet;
        use crate::tensor::Tensor;
        let mut params = ParamSet::new();
        params.add("d", Tensor::new(vec![5, 1], vec![0.5, 1.5, 2.0, 0.1, 3.0]).unwrap()).unwrap();
        let forward = |p: &ParamSet| -> Result<(Tape, BufId, Vec<BufId>)> {
            let mut tape = Tape::new();
            let ids = p.register_on(&mut tape)?;
            let n = density_norm_on_tape(&mut tape, ids[0])?;
            Ok((tape, n, ids))
        };
        let (mut tape, root, ids) = forward(&params).unwrap();
        tape.backward(root).unwrap();
        params.accumulate_grads(&tape, &ids);
        let report = crate::check::finite_diff_check(
            &mut params,
            |p| forward(p).map(|(t, r, _)| t.scalar_value(r)),
            crate::check::DEFAULT_EPSILON,
            8,
            14,
        )
        .unwrap();
        assert!(crate::check::worst_of(&report) < 1e-4);
    }

    #[test]
    fn overall_is_exact_linear_combination() {
        let target = random_image(16, 16, 7);
        let low = random_image(4, 4, 8);
        let high = random_image(16, 16, 9);
        let w = LossWeights { lambda_rec: 0.5, lambda_perc: 0.1, lambda_norm: 0.1 };
        let densities: Vec<f64> = (0..20).map(|i| i as f64 / 3.0).collect();
        let report = run_rec(&low, &high, &target, &densities, &w);
        let expect = 0.5 * report.rec + 0.1 * report.norm;
        assert_eq!(report.overall.to_bits(), expect.to_bits());

        // lambda_rec = 1, lambda_norm = 0 -> overall = rec
        let w2 = LossWeights { lambda_rec: 1.0, lambda_perc: 0.1, lambda_norm: 0.0 };
        let r2 = run_rec(&low, &high, &target, &densities, &w2);
        assert_eq!(r2.overall.to_bits(), (1.0 * r2.rec + 0.0 * r2.norm).to_bits());
    }

    #[test]
    fn arithmetic_example() {
        // rec = 2, norm = 10, lambda_rec = 0.5, lambda_norm = 0.1 -> 2.0
        assert_eq!(0.5 * 2.0 + 0.1 * 10.0, 2.0);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random_image(8, 8, 10);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        // MSE = 0.01 -> 20 dB
        let b = RgbImage::new(8, 8, a.data.iter().map(|v| if *v <= 0.9 { v + 0.1 } else { v - 0.1 }).collect()).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
    }

    #[test]
    fn psnr_matches_scalar_reference() {
        let a = random_image(8, 8, 11);
        let b = random_image(8, 8, 12);
        let mse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
        let expect = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_identical_is_one_and_reference_matches() {
        let a = random_image(12, 12, 13);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let b = random_image(12, 12, 14);
        let got = ssim(&a, &b).unwrap();
        // independent scalar reference
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..3 {
            for i in 0..=12 - 8 {
                for j in 0..=12 - 8 {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for di in 0..8 {
                        for dj in 0..8 {
                            xs.push(a.data[((i + di) * 12 + j + dj) * 3 + ch]);
                            ys.push(b.data[((i + di) * 12 + j + dj) * 3 + ch]);
                        }
                    }
                    let n = 64.0;
                    let mx = xs.iter().sum::<f64>() / n;
                    let my = ys.iter().sum::<f64>() / n;
                    let vx = xs.iter().map(|x| x * x).sum::<f64>() / n - mx * mx;
                    let vy = ys.iter().map(|y| y * y).sum::<f64>() / n - my * my;
                    let cov = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / n - mx * my;
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        let expect = total / count as f64;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((-1.0..=1.0).contains(&got));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use crate::params::ParamSet;
        use crate::tensor::Tensor;
        let target = random_image(16, 16, 15);
        let low = random_image(4, 4, 16);
        let high = random_image(16, 16, 17);
        let mut params = ParamSet::new();
        params.add("low", Tensor::new(vec![16, 3], low.data.clone()).unwrap()).unwrap();
        params.add("high", Tensor::new(vec![256, 3], high.data.clone()).unwrap()).unwrap();
        params.add("densities", Tensor::new(vec![10, 1], (0..10).map(|i| 0.3 + i as f64 * 0.2).collect()).unwrap()).unwrap();
        let weights = LossWeights::default();
        let forward = |p: &ParamSet| -> Result<(Tape, BufId, Vec<BufId>)> {
            let mut tape = Tape::new();
            let ids = p.register_on(&mut tape)?;
            let (_, root) = overall_loss_on_tape(&mut tape, ids[0], ids[1], ids[2], &target, 4, 4, &weights)?;
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
            18,
        )
        .unwrap();
        assert!(crate::check::worst_of(&report) < 1e-4, "worst {}", crate::check::worst_of(&report));
    }
}
