// temporary calibration probe for the fitting loop
use avatar_core::adam::AdamState;
use avatar_core::model::{AvatarModel, ModelConfig};
use avatar_core::pipeline::{evaluate_holdout, fit_loop, Dataset, FitConfig};
use avatar_core::points::load_point_model;
use avatar_core::synth::{synth_dataset, SynthOptions};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(60);
    let dir = std::path::PathBuf::from("/tmp/fitprobe");
    if !dir.join("manifest.json").exists() {
        let t = Instant::now();
        synth_dataset(&dir, &SynthOptions::toy(7)).unwrap();
        println!("synth: {:.1} s", t.elapsed().as_secs_f64());
    }
    let dataset = Dataset::load(&dir.join("manifest.json")).unwrap();
    let asset = load_point_model(&dir.join("asset.json")).unwrap();
    let cfg = ModelConfig::toy();
    let mut model = AvatarModel::new(asset, cfg, 7).unwrap();
    let fit = FitConfig {
        steps,
        eval_every: 100,
        ..FitConfig::default()
    };
    let mut adam = AdamState::new(&model.params, fit.lr);
    let before = evaluate_holdout(&model, &dataset, fit.seed).unwrap();
    println!("init: psnr {:.2} ssim {:.3} l1 {:.4}", before.psnr, before.ssim, before.l1);
    let t = Instant::now();
    let reports = fit_loop(&mut model, &dataset, &fit, &mut adam, 0, &dir.join("out")).unwrap();
    let el = t.elapsed().as_secs_f64();
    println!(
        "fit {} steps in {:.1} s ({:.0} ms/step); loss {:.4} -> {:.4}",
        steps,
        el,
        el / steps as f64 * 1e3,
        reports.first().unwrap().overall,
        reports.last().unwrap().overall
    );
    let after = evaluate_holdout(&model, &dataset, fit.seed).unwrap();
    println!("final: psnr {:.2} ssim {:.3} l1 {:.4}", after.psnr, after.ssim, after.l1);
}
