use avatar_core::expr_field::{features_on_tape, ExprFieldConfig, NeighborBatch};
use avatar_core::knn::{BruteIndex, SpatialIndex};
use avatar_core::points::{evaluate_point_model, load_point_model, FlameParams};
use avatar_core::tape::Tape;
use rand::Rng;
use std::time::Instant;

fn main() {
    // raw activation throughput
    {
        let n = 9_216_000usize;
        let x: Vec<f64> = (0..n).map(|i| (i % 2000) as f64 / 100.0 - 10.0).collect();
        let mut y = vec![0.0; n];
        let mut d = vec![0.0; n];
        let t = Instant::now();
        avatar_core::kernels::softplus_slice(&x, &mut y, Some(&mut d));
        println!("softplus_slice 9.2M with deriv: {:.0} ms ({:.1} ns/elem)", t.elapsed().as_secs_f64()*1e3, t.elapsed().as_secs_f64()/n as f64*1e9);
        let t = Instant::now();
        avatar_core::kernels::sigmoid_slice(&x, &mut y);
        println!("sigmoid_slice 9.2M: {:.0} ms", t.elapsed().as_secs_f64()*1e3);
    }
    let dir = std::path::PathBuf::from("/tmp/fitprobe");
    let asset = load_point_model(&dir.join("asset.json")).unwrap();
    let cloud = evaluate_point_model(&asset, &FlameParams::zeros(&asset)).unwrap();
    let index = BruteIndex::build(&cloud).unwrap();
    let cfg = ExprFieldConfig::default();

    // realistic sample positions: rays through the cube
    let mut rng = avatar_core::rng::stream(0, "piece");
    let s_count = 36_000usize;
    let mut xs = Vec::with_capacity(s_count * 3);
    for _ in 0..s_count {
        xs.push(rng.random_range(-0.5..0.5f64));
        xs.push(rng.random_range(-0.5..0.5f64));
        xs.push(rng.random_range(-0.5..0.5f64));
    }

    let t = Instant::now();
    let batch = NeighborBatch::gather(&xs, &index, &cfg).unwrap();
    println!("knn gather 36k: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);

    // stage timing on separate tapes
    {
        let p = asset.point_count();
        let table: Vec<f64> = (0..p * 32).map(|_| rng.random_range(-0.05..0.05f64)).collect();
        let mut tape = Tape::new();
        let tb = tape.leaf_param(table.clone(), p, 32).unwrap();
        let t = Instant::now();
        let g = tape.gather_rows(tb, batch.indices.clone()).unwrap();
        println!("  gather_rows: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        let e = tape.freq_encode(batch.rel.clone(), 6).unwrap();
        println!("  freq_encode 288k rows: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        let cc = tape.concat_cols(&[g, e]).unwrap();
        println!("  concat: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);
        let w1: Vec<f64> = (0..71 * 32).map(|_| rng.random_range(-0.1..0.1f64)).collect();
        let w1b = tape.leaf_param(w1, 71, 32).unwrap();
        let t = Instant::now();
        let l1 = tape.linear(cc, w1b, None).unwrap();
        println!("  linear 71->32: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        let a1 = tape.activation(l1, avatar_core::tape::ActKind::Softplus).unwrap();
        println!("  softplus op: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        let po = tape.pool_weighted(a1, batch.weights.clone(), batch.offsets.clone()).unwrap();
        println!("  pool: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);
        let _ = po;
    }

    // PEF forward on tape
    let p = asset.point_count();
    let table: Vec<f64> = (0..p * 32).map(|_| rng.random_range(-0.05..0.05)).collect();
    let w1: Vec<f64> = (0..71 * 32).map(|_| rng.random_range(-0.1..0.1)).collect();
    let w2: Vec<f64> = (0..32 * 32).map(|_| rng.random_range(-0.1..0.1)).collect();
    let b: Vec<f64> = vec![0.0; 32];
    let t = Instant::now();
    let mut tape = Tape::new();
    let tb = tape.leaf_param(table.clone(), p, 32).unwrap();
    let w1b = tape.leaf_param(w1.clone(), 71, 32).unwrap();
    let b1b = tape.leaf_param(b.clone(), 1, 32).unwrap();
    let w2b = tape.leaf_param(w2.clone(), 32, 32).unwrap();
    let b2b = tape.leaf_param(b.clone(), 1, 32).unwrap();
    let out = features_on_tape(&mut tape, tb, w1b, b1b, w2b, b2b, &batch, &cfg).unwrap();
    println!("pef forward 36k samples (288k rows): {:.0} ms", t.elapsed().as_secs_f64() * 1e3);

    let t = Instant::now();
    let sq = tape.mul(out, out).unwrap();
    let root = tape.mean_all(sq).unwrap();
    tape.backward(root).unwrap();
    println!("pef backward: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);

    // trunk-scale matmuls
    let m = 36_000usize;
    let x: Vec<f64> = (0..m * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..64 * 128).map(|_| rng.random_range(-0.1..0.1)).collect();
    let mut y = vec![0.0; m * 128];
    let t = Instant::now();
    avatar_core::kernels::matmul_bias(&x, &w, None, &mut y, m, 64, 128);
    println!("trunk fwd matmul 36k x 64 x 128: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);
    let mut dw = vec![0.0; 64 * 128];
    let t = Instant::now();
    avatar_core::kernels::matmul_dw(&x, &y, &mut dw, m, 64, 128);
    println!("trunk dw matmul: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);
    let mut dx = vec![0.0; m * 64];
    let t = Instant::now();
    avatar_core::kernels::matmul_dx(&y, &w, &mut dx, m, 64, 128);
    println!("trunk dx matmul: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);

    // pef-scale dW (288k rows)
    let m2 = 288_000usize;
    let x2: Vec<f64> = (0..m2 * 71).map(|i| ((i * 31) % 1000) as f64 / 1000.0).collect();
    let dy2: Vec<f64> = (0..m2 * 32).map(|i| ((i * 17) % 1000) as f64 / 1000.0).collect();
    let mut dw2 = vec![0.0; 71 * 32];
    let t = Instant::now();
    avatar_core::kernels::matmul_dw(&x2, &dy2, &mut dw2, m2, 71, 32);
    println!("pef dw matmul 288k x 71 x 32: {:.0} ms", t.elapsed().as_secs_f64() * 1e3);
}
