// temporary perf probe
use avatar_core::{kernels, knn, knn::SpatialIndex, points, rng};
use rand::Rng;
use std::time::Instant;

fn main() {
    // matmul throughput at render-like sizes
    for (m, k, n) in [(32768usize, 71usize, 32usize), (8192, 64, 128), (8192, 128, 128)] {
        let x: Vec<f64> = (0..m * k).map(|i| (i % 97) as f64 / 100.0).collect();
        let w: Vec<f64> = (0..k * n).map(|i| (i % 89) as f64 / 100.0).collect();
        let mut y = vec![0.0; m * n];
        let t = Instant::now();
        let reps = 20;
        for _ in 0..reps {
            kernels::matmul_bias(&x, &w, None, &mut y, m, k, n);
        }
        let el = t.elapsed().as_secs_f64();
        let gflops = (2.0 * (m * k * n * reps) as f64) / el / 1e9;
        println!("matmul {m}x{k}x{n}: {gflops:.1} GFLOP/s");
    }

    // KNN at toy fit scale: shell cloud, ray-like chained queries
    let asset = points::make_toy_asset(7, 642, 8, 6, 10).unwrap();
    let cloud = points::evaluate_point_model(&asset, &points::FlameParams::zeros(&asset)).unwrap();
    let t = Instant::now();
    let mut idx = knn::build_index(&cloud, 0.5).unwrap();
    for _ in 0..9 {
        idx = knn::build_index(&cloud, 0.5).unwrap();
    }
    println!("grid build: {:.2} ms", t.elapsed().as_secs_f64() * 100.0);

    // queries along rays: origin at 1.3 distance marching through cube
    let mut rng = rng::stream(1, "probe");
    let mut xs = Vec::new();
    for _ in 0..1024 {
        let dir = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0f64];
        let n = (dir[0]*dir[0]+dir[1]*dir[1]+1.0).sqrt();
        for s in 0..48 {
            let t = 0.8 + 1.0 * (s as f64 + 0.5) / 48.0;
            xs.push(-0.0 + dir[0]/n*t - 0.0);
            xs.push(dir[1]/n*t);
            xs.push(-1.3 + dir[2]/n*t);
        }
    }
    let nq = xs.len()/3;
    let t = Instant::now();
    let res = idx.query_batch(&xs, 8, None).unwrap();
    let el = t.elapsed().as_secs_f64();
    println!("grid batch: {nq} queries in {:.1} ms ({:.0} ns/query)", el*1e3, el/nq as f64*1e9);
    let total: usize = res.iter().map(|r| r.len()).sum();
    println!("sanity: {total} neighbors");
    let bi = knn::BruteIndex::build(&cloud).unwrap();
    let t = Instant::now();
    let resb = bi.query_batch(&xs, 8, None).unwrap();
    let el = t.elapsed().as_secs_f64();
    println!("brute642 batch: {nq} queries in {:.1} ms ({:.0} ns/query), match={}", el*1e3, el/nq as f64*1e9, res == resb);
    let ki = knn::KdTreeIndex::build(&cloud).unwrap();
    let t = Instant::now();
    let resk = ki.query_batch(&xs, 8, None).unwrap();
    let el = t.elapsed().as_secs_f64();
    println!("kdtree642 batch: {nq} queries in {:.1} ms ({:.0} ns/query), match={}", el*1e3, el/nq as f64*1e9, res == resk);

    // 5023-point criterion-2 scale
    let mut rng = rng::stream(2, "probe2");
    let big = points::PointCloud { positions: (0..5023*3).map(|_| rng.random_range(-0.5..0.5)).collect() };
    let gi = knn::GridIndex::build(&big, 0.5).unwrap();
    let qs: Vec<f64> = (0..100_000*3).map(|_| rng.random_range(-0.5..0.5)).collect();
    let t = Instant::now();
    let r8 = gi.query_batch(&qs, 8, None).unwrap();
    println!("5023pts 100k queries K=8: {:.2} s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let brute = knn::BruteIndex::build(&big).unwrap();
    let rb = brute.query_batch(&qs, 8, None).unwrap();
    println!("brute 100k queries K=8: {:.2} s", t.elapsed().as_secs_f64());
    println!("match: {}", r8 == rb);
}
