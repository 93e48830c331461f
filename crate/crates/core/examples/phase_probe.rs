use avatar_core::adam::AdamState;
use avatar_core::model::{AvatarModel, ModelConfig};
use avatar_core::objectives::{overall_loss_on_tape, LossWeights};
use avatar_core::pipeline::{fit_step, forward_render, Dataset};
use avatar_core::points::load_point_model;
use std::time::Instant;

fn main() {
    let dir = std::path::PathBuf::from("/tmp/fitprobe");
    let dataset = Dataset::load(&dir.join("manifest.json")).unwrap();
    let asset = load_point_model(&dir.join("asset.json")).unwrap();
    let mut model = AvatarModel::new(asset, ModelConfig::toy(), 7).unwrap();
    let e = &dataset.manifest.entries[0];

    let t = Instant::now();
    let (tape, handles) = forward_render(&model, &e.flame, &e.camera, &[0], 1, false).unwrap();
    println!("forward eval-mode: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);
    drop(tape);
    let _ = handles;

    let t = Instant::now();
    let (tape, handles) = forward_render(&model, &e.flame, &e.camera, &[0], 1, true).unwrap();
    println!("forward train-mode: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);

    let t = Instant::now();
    let mut tape = tape;
    let (_, root) = overall_loss_on_tape(
        &mut tape, handles.low_rgb, handles.high, handles.densities,
        &dataset.targets[0], model.cfg.low_h, model.cfg.low_w, &LossWeights::default(),
    ).unwrap();
    println!("losses: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);

    let t = Instant::now();
    tape.backward(root).unwrap();
    println!("backward: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);

    let t = Instant::now();
    let mut adam = AdamState::new(&model.params, 1e-4);
    let _ = fit_step(&mut model, &mut adam, &e.flame, &e.camera, &dataset.targets[0], &[0], &LossWeights::default(), 2).unwrap();
    println!("full fit_step: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);
}
