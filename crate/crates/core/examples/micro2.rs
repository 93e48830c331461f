use std::time::Instant;
use rand::Rng;

struct Soa { positions: Vec<f64>, xs: Vec<f64>, ys: Vec<f64>, zs: Vec<f64> }

impl Soa {
    fn point_count(&self) -> usize { self.positions.len() / 3 }
    fn pass1(&self, x: [f64; 3], scratch: &mut [f64]) {
        let p = self.point_count();
        let (xs, ys, zs) = (&self.xs[..p], &self.ys[..p], &self.zs[..p]);
        let scratch = &mut scratch[..p];
        for i in 0..p {
            let dx = xs[i] - x[0];
            let dy = ys[i] - x[1];
            let dz = zs[i] - x[2];
            scratch[i] = dx * dx + dy * dy + dz * dz;
        }
    }
}

fn main() {
    let p = 642usize;
    let nq = 49152usize;
    let mut rng = avatar_core::rng::stream(0, "micro2");
    let xs: Vec<f64> = (0..p).map(|_| rng.random_range(-0.4..0.4)).collect();
    let ys: Vec<f64> = (0..p).map(|_| rng.random_range(-0.4..0.4)).collect();
    let zs: Vec<f64> = (0..p).map(|_| rng.random_range(-0.4..0.4)).collect();
    let queries: Vec<f64> = (0..nq * 3).map(|_| rng.random_range(-0.6..0.6)).collect();
    let soa = Soa { positions: vec![0.0; p * 3], xs, ys, zs };

    let mut scratch = vec![0.0; p];
    let t = Instant::now();
    let mut acc = 0.0;
    for qi in 0..nq {
        let q = [queries[qi * 3], queries[qi * 3 + 1], queries[qi * 3 + 2]];
        soa.pass1(q, &mut scratch);
        acc += scratch[p - 1];
    }
    println!("struct pass1: {:.0} ns/query (acc {acc:.3})", t.elapsed().as_secs_f64() / nq as f64 * 1e9);

    // exact one-query path through the real index, single thread, no rayon
    use avatar_core::knn::SpatialIndex;
    let mut positions = Vec::with_capacity(p * 3);
    for i in 0..p {
        positions.extend_from_slice(&[soa.xs[i], soa.ys[i], soa.zs[i]]);
    }
    let cloud = avatar_core::points::PointCloud { positions };
    let bi = avatar_core::knn::BruteIndex::build(&cloud).unwrap();
    let t = Instant::now();
    let mut total = 0usize;
    for qi in 0..nq {
        let q = [queries[qi * 3], queries[qi * 3 + 1], queries[qi * 3 + 2]];
        let r = bi.query_capped(q, 8, None, None);
        total += r.indices[0] as usize;
    }
    println!("real query_capped (allocs scratch per call): {:.0} ns/query ({total})", t.elapsed().as_secs_f64() / nq as f64 * 1e9);
}
