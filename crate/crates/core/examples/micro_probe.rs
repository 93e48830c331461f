use std::time::Instant;
use rand::Rng;

fn main() {
    let p = 642usize;
    let nq = 49152usize;
    let mut rng = avatar_core::rng::stream(0, "micro");
    let xs: Vec<f64> = (0..p).map(|_| rng.random_range(-0.4..0.4)).collect();
    let ys: Vec<f64> = (0..p).map(|_| rng.random_range(-0.4..0.4)).collect();
    let zs: Vec<f64> = (0..p).map(|_| rng.random_range(-0.4..0.4)).collect();
    let queries: Vec<f64> = (0..nq * 3).map(|_| rng.random_range(-0.6..0.6)).collect();

    // pass 1 only
    let mut scratch = vec![0.0; p];
    let t = Instant::now();
    let mut acc = 0.0;
    for qi in 0..nq {
        let q = [queries[qi * 3], queries[qi * 3 + 1], queries[qi * 3 + 2]];
        for i in 0..p {
            let dx = xs[i] - q[0];
            let dy = ys[i] - q[1];
            let dz = zs[i] - q[2];
            scratch[i] = dx * dx + dy * dy + dz * dz;
        }
        acc += scratch[p - 1];
    }
    let el = t.elapsed().as_secs_f64();
    println!("pass1 only: {:.0} ns/query (acc {acc:.3})", el / nq as f64 * 1e9);

    // pass 1 + selection scan
    let t = Instant::now();
    let mut found = 0usize;
    for qi in 0..nq {
        let q = [queries[qi * 3], queries[qi * 3 + 1], queries[qi * 3 + 2]];
        for i in 0..p {
            let dx = xs[i] - q[0];
            let dy = ys[i] - q[1];
            let dz = zs[i] - q[2];
            scratch[i] = dx * dx + dy * dy + dz * dz;
        }
        let mut best = [(f64::INFINITY, u32::MAX); 8];
        let mut bound = f64::INFINITY;
        for (i, &d2) in scratch.iter().enumerate() {
            if d2 <= bound {
                // insertion into fixed array
                let mut pos = 8;
                while pos > 0 && (best[pos - 1].0, best[pos - 1].1) > (d2, i as u32) {
                    pos -= 1;
                }
                if pos < 8 {
                    best.copy_within(pos..7, pos + 1);
                    best[pos] = (d2, i as u32);
                    bound = best[7].0;
                }
            }
        }
        found += best.iter().filter(|b| b.1 != u32::MAX).count();
    }
    let el = t.elapsed().as_secs_f64();
    println!("pass1+select: {:.0} ns/query (found {found})", el / nq as f64 * 1e9);

    // same plus 3 small allocations per query (KnnResult shape)
    let t = Instant::now();
    let mut keep = 0usize;
    for qi in 0..nq {
        let q = [queries[qi * 3], queries[qi * 3 + 1], queries[qi * 3 + 2]];
        for i in 0..p {
            let dx = xs[i] - q[0];
            let dy = ys[i] - q[1];
            let dz = zs[i] - q[2];
            scratch[i] = dx * dx + dy * dy + dz * dz;
        }
        let mut entries: Vec<(f64, u32)> = Vec::with_capacity(9);
        let mut bound = f64::INFINITY;
        for (i, &d2) in scratch.iter().enumerate() {
            if d2 <= bound {
                let len = entries.len();
                if len == 8 {
                    if (d2, i as u32) >= (entries[7].0, entries[7].1) { continue; }
                } else {
                    entries.push((d2, i as u32));
                }
                let s = entries.as_mut_slice();
                let mut pos = s.len() - 1;
                while pos > 0 && (s[pos-1].0, s[pos-1].1) > (d2, i as u32) {
                    s[pos] = s[pos-1];
                    pos -= 1;
                }
                s[pos] = (d2, i as u32);
                if entries.len() == 8 { bound = entries[7].0; }
            }
        }
        let idxs: Vec<u32> = entries.iter().map(|e| e.1).collect();
        let ds: Vec<f64> = entries.iter().map(|e| e.0.sqrt()).collect();
        keep += idxs.len() + ds.len();
    }
    let el = t.elapsed().as_secs_f64();
    println!("pass1+select+allocs: {:.0} ns/query (keep {keep})", el / nq as f64 * 1e9);

    // real BruteIndex on the same random queries, 1 thread then default
    use avatar_core::knn::SpatialIndex;
    let mut positions = Vec::with_capacity(p * 3);
    for i in 0..p {
        positions.extend_from_slice(&[xs[i], ys[i], zs[i]]);
    }
    let cloud = avatar_core::points::PointCloud { positions };
    let bi = avatar_core::knn::BruteIndex::build(&cloud).unwrap();
    let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let t = Instant::now();
    let r1 = pool1.install(|| bi.query_batch(&queries, 8, None).unwrap());
    println!("BruteIndex 1-thread: {:.0} ns/query", t.elapsed().as_secs_f64() / nq as f64 * 1e9);
    let t = Instant::now();
    let r2 = bi.query_batch(&queries, 8, None).unwrap();
    println!("BruteIndex default: {:.0} ns/query (match {})", t.elapsed().as_secs_f64() / nq as f64 * 1e9, r1 == r2);
}


