//! Hot numeric kernels shared by the tape and the untaped forward paths.
//!
//! Every kernel has a fixed accumulation order that does not depend on the
//! rayon thread count: parallel loops partition output elements disjointly
//! (rows for forward/input-gradient passes, weight rows for weight-gradient
//! passes), and cross-row reductions fold fixed-size chunk partials in chunk
//! order. This is what makes forward values and gradients bit-identical
//! across runs regardless of `--threads`.

use rayon::prelude::*;

/// Rows per parallel chunk. Fixed so results never depend on thread count.
pub const CHUNK_ROWS: usize = 1024;

/// Minimum row count before a kernel bothers spawning parallel work.
const PAR_THRESHOLD: usize = 256;

/// y[M×N] = x[M×K] · w[K×N] (+ bias broadcast over rows).
pub fn matmul_bias(x: &[f64], w: &[f64], bias: Option<&[f64]>, y: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(y.len(), m * n);
    let run_rows = |x_rows: &[f64], y_rows: &mut [f64]| {
        let rows = y_rows.len() / n;
        for r in 0..rows {
            let xr = &x_rows[r * k..(r + 1) * k];
            let yr = &mut y_rows[r * n..(r + 1) * n];
            match bias {
                Some(b) => yr.copy_from_slice(b),
                None => yr.fill(0.0),
            }
            // 4-way unroll over k keeps the accumulator row in registers
            // longer; the j-inner loops vectorize over contiguous w rows.
            let k4 = k & !3;
            let mut kk = 0;
            while kk < k4 {
                let (x0, x1, x2, x3) = (xr[kk], xr[kk + 1], xr[kk + 2], xr[kk + 3]);
                let w0 = &w[kk * n..(kk + 1) * n];
                let w1 = &w[(kk + 1) * n..(kk + 2) * n];
                let w2 = &w[(kk + 2) * n..(kk + 3) * n];
                let w3 = &w[(kk + 3) * n..(kk + 4) * n];
                for j in 0..n {
                    yr[j] += x0 * w0[j] + x1 * w1[j] + x2 * w2[j] + x3 * w3[j];
                }
                kk += 4;
            }
            while kk < k {
                axpy(xr[kk], &w[kk * n..(kk + 1) * n], yr);
                kk += 1;
            }
        }
    };
    if m >= PAR_THRESHOLD {
        y.par_chunks_mut(CHUNK_ROWS * n)
            .zip(x.par_chunks(CHUNK_ROWS * k))
            .for_each(|(yc, xc)| run_rows(xc, yc));
    } else {
        run_rows(x, y);
    }
}

/// dx[M×K] += dy[M×N] · wᵀ. Transposes w once so each row runs the same
/// streaming axpy pattern as the forward pass.
pub fn matmul_dx(dy: &[f64], w: &[f64], dx: &mut [f64], m: usize, k: usize, n: usize) {
    let mut wt = vec![0.0; n * k];
    for kk in 0..k {
        for j in 0..n {
            wt[j * k + kk] = w[kk * n + j];
        }
    }
    let run_rows = |dy_rows: &[f64], dx_rows: &mut [f64]| {
        let rows = dx_rows.len() / k;
        for r in 0..rows {
            let dyr = &dy_rows[r * n..(r + 1) * n];
            let dxr = &mut dx_rows[r * k..(r + 1) * k];
            let n4 = n & !3;
            let mut j = 0;
            while j < n4 {
                let (y0, y1, y2, y3) = (dyr[j], dyr[j + 1], dyr[j + 2], dyr[j + 3]);
                let w0 = &wt[j * k..(j + 1) * k];
                let w1 = &wt[(j + 1) * k..(j + 2) * k];
                let w2 = &wt[(j + 2) * k..(j + 3) * k];
                let w3 = &wt[(j + 3) * k..(j + 4) * k];
                for kk in 0..k {
                    dxr[kk] += y0 * w0[kk] + y1 * w1[kk] + y2 * w2[kk] + y3 * w3[kk];
                }
                j += 4;
            }
            while j < n {
                axpy(dyr[j], &wt[j * k..(j + 1) * k], dxr);
                j += 1;
            }
        }
    };
    if m >= PAR_THRESHOLD {
        dx.par_chunks_mut(CHUNK_ROWS * k)
            .zip(dy.par_chunks(CHUNK_ROWS * n))
            .for_each(|(dxc, dyc)| run_rows(dyc, dxc));
    } else {
        run_rows(dy, dx);
    }
}

/// dw[K×N] += xᵀ · dy. Streams x and dy once: fixed-size row chunks build
/// local accumulators in sample order, folded into dw in chunk order.
pub fn matmul_dw(x: &[f64], dy: &[f64], dw: &mut [f64], m: usize, k: usize, n: usize) {
    let run_chunk = |x_rows: &[f64], dy_rows: &[f64], acc: &mut [f64]| {
        let rows = x_rows.len() / k;
        for r in 0..rows {
            let xr = &x_rows[r * k..(r + 1) * k];
            let dyr = &dy_rows[r * n..(r + 1) * n];
            for (kk, &xv) in xr.iter().enumerate() {
                if xv != 0.0 {
                    axpy(xv, dyr, &mut acc[kk * n..(kk + 1) * n]);
                }
            }
        }
    };
    if m >= PAR_THRESHOLD {
        let partials: Vec<Vec<f64>> = x
            .par_chunks(CHUNK_ROWS * k)
            .zip(dy.par_chunks(CHUNK_ROWS * n))
            .map(|(xc, dyc)| {
                let mut acc = vec![0.0; k * n];
                run_chunk(xc, dyc, &mut acc);
                acc
            })
            .collect();
        for p in partials {
            axpy(1.0, &p, dw);
        }
    } else {
        run_chunk(x, dy, dw);
    }
}

/// db[N] += column sums of dy[M×N]; chunk partials folded in chunk order.
pub fn bias_grad(dy: &[f64], db: &mut [f64], m: usize, n: usize) {
    if m >= PAR_THRESHOLD {
        let partials: Vec<Vec<f64>> = dy
            .par_chunks(CHUNK_ROWS * n)
            .map(|chunk| {
                let mut acc = vec![0.0; n];
                for row in chunk.chunks_exact(n) {
                    axpy(1.0, row, &mut acc);
                }
                acc
            })
            .collect();
        for p in partials {
            axpy(1.0, &p, db);
        }
    } else {
        for row in dy.chunks_exact(n) {
            axpy(1.0, row, db);
        }
    }
}

/// Sum of all elements, chunk partials folded in chunk order.
pub fn sum_all(x: &[f64]) -> f64 {
    if x.len() >= PAR_THRESHOLD * 64 {
        let partials: Vec<f64> = x
            .par_chunks(CHUNK_ROWS * 64)
            .map(|c| c.iter().sum::<f64>())
            .collect();
        partials.iter().sum()
    } else {
        x.iter().sum()
    }
}

#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Dot product with four independent accumulators (fixed order, deterministic;
/// breaks the serial dependency chain for throughput).
#[inline]
pub fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let n4 = n & !3;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut i = 0;
    while i < n4 {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut acc = (s0 + s1) + (s2 + s3);
    while i < n {
        acc += a[i] * b[i];
        i += 1;
    }
    acc
}

// ── fast transcendentals ─────────────────────────────────────────────
//
// Activation layers evaluate tens of millions of softplus/sigmoid values
// per optimization step; libm calls do not vectorize, so exp and ln(1+t)
// are implemented here with branch-light polynomial kernels (~1 ulp over
// the ranges the activations use). Accuracy is pinned by tests against the
// standard library.

const LN2_HI: f64 = 6.931_471_803_691_238_16e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_70e-10;
const LOG2_E: f64 = std::f64::consts::LOG2_E;

/// exp(x) to within ~1 ulp; exact 0/inf outside the finite range.
#[inline]
pub fn fast_exp(x: f64) -> f64 {
    if x > 709.0 {
        return f64::INFINITY;
    }
    if x < -745.0 {
        return 0.0;
    }
    let n = (x * LOG2_E).round_ties_even();
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // Taylor to r^13 on |r| <= ln2/2 (max truncation ~4e-18)
    let mut p = 1.0 / 6_227_020_800.0; // 1/13!
    for inv in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + inv;
    }
    // scale by 2^n in two steps so subnormal results stay finite
    let n = n as i64;
    let (n1, n2) = (n / 2, n - n / 2);
    let s1 = f64::from_bits(((n1 + 1023) as u64) << 52);
    let s2 = f64::from_bits(((n2 + 1023) as u64) << 52);
    p * s1 * s2
}

/// ln(x) for finite positive x, ~1 ulp.
#[inline]
pub fn fast_ln(x: f64) -> f64 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let mut e = ((bits >> 52) as i64) - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    // subnormals
    if e == -1023 {
        let scaled = x * f64::from_bits(1075u64 << 52); // 2^52
        let sb = scaled.to_bits();
        e = ((sb >> 52) as i64) - 1023 - 52;
        m = f64::from_bits((sb & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    }
    if m > std::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    let s = (m - 1.0) / (m + 1.0); // |s| <= 0.1716
    let z = s * s;
    // 2 atanh(s): odd series to s^19 (truncation ~9e-18)
    let mut p = 1.0 / 19.0;
    for inv in [
        1.0 / 17.0,
        1.0 / 15.0,
        1.0 / 13.0,
        1.0 / 11.0,
        1.0 / 9.0,
        1.0 / 7.0,
        1.0 / 5.0,
        1.0 / 3.0,
        1.0,
    ] {
        p = p * z + inv;
    }
    let lnm = 2.0 * s * p;
    e as f64 * LN2_HI + (lnm + e as f64 * LN2_LO)
}

/// ln(1 + t) for t >= 0, ~1 ulp (exact correction for the 1 + t rounding).
#[inline]
pub fn fast_ln_1p(t: f64) -> f64 {
    if t < 1e-16 {
        return t;
    }
    let u = 1.0 + t;
    if u.is_infinite() {
        return fast_ln(f64::MAX) + 1.0; // unreachable at activation ranges
    }
    let c = if u <= 2.0 { t - (u - 1.0) } else { (1.0 - u) + t };
    fast_ln(u) + c / u
}

/// exp(a) for a <= 0, branch-free (vectorizes inside slice loops).
#[inline(always)]
fn exp_core_nonpos(a: f64) -> f64 {
    let a = a.max(-745.0);
    let n = (a * LOG2_E).round_ties_even();
    let r = (a - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let n = n as i64;
    let (n1, n2) = (n / 2, n - n / 2);
    let s1 = f64::from_bits(((n1 + 1023) as u64) << 52);
    let s2 = f64::from_bits(((n2 + 1023) as u64) << 52);
    p * s1 * s2
}

/// ln(1 + t) for t in [0, 1], branch-free. The `c / u` correction makes the
/// tiny-t regime exact without a special case.
#[inline(always)]
fn ln_1p_unit_core(t: f64) -> f64 {
    let u = 1.0 + t;
    let c = t - (u - 1.0);
    let halve = u > std::f64::consts::SQRT_2;
    let m = if halve { 0.5 * u } else { u };
    let e = if halve { 1.0 } else { 0.0 };
    let s = (m - 1.0) / (m + 1.0);
    let z = s * s;
    let mut p = 1.0 / 19.0;
    p = p * z + 1.0 / 17.0;
    p = p * z + 1.0 / 15.0;
    p = p * z + 1.0 / 13.0;
    p = p * z + 1.0 / 11.0;
    p = p * z + 1.0 / 9.0;
    p = p * z + 1.0 / 7.0;
    p = p * z + 1.0 / 5.0;
    p = p * z + 1.0 / 3.0;
    p = p * z + 1.0;
    let lnm = 2.0 * s * p;
    e * LN2_HI + (lnm + e * LN2_LO) + c / u
}

/// Overflow-safe softplus: log(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + ln_1p_unit_core(exp_core_nonpos(-x.abs()))
}

/// d/dx softplus(x) = sigmoid(x).
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let t = exp_core_nonpos(-x.abs());
    let s = 1.0 / (1.0 + t);
    if x >= 0.0 {
        s
    } else {
        1.0 - s
    }
}

/// Batched softplus; when `deriv` is given it receives sigmoid(x) computed
/// from the shared exponential.
pub fn softplus_slice(input: &[f64], out: &mut [f64], mut deriv: Option<&mut [f64]>) {
    let run = |input: &[f64], out: &mut [f64], deriv: Option<&mut [f64]>| {
        match deriv {
            Some(d) => {
                for i in 0..input.len() {
                    let x = input[i];
                    let t = exp_core_nonpos(-x.abs());
                    out[i] = x.max(0.0) + ln_1p_unit_core(t);
                    let s = 1.0 / (1.0 + t);
                    d[i] = if x >= 0.0 { s } else { 1.0 - s };
                }
            }
            None => {
                for i in 0..input.len() {
                    let x = input[i];
                    out[i] = x.max(0.0) + ln_1p_unit_core(exp_core_nonpos(-x.abs()));
                }
            }
        }
    };
    if input.len() >= PAR_THRESHOLD * 16 {
        match deriv.take() {
            Some(d) => {
                input
                    .par_chunks(CHUNK_ROWS * 16)
                    .zip(out.par_chunks_mut(CHUNK_ROWS * 16))
                    .zip(d.par_chunks_mut(CHUNK_ROWS * 16))
                    .for_each(|((i, o), dd)| run(i, o, Some(dd)));
            }
            None => {
                input
                    .par_chunks(CHUNK_ROWS * 16)
                    .zip(out.par_chunks_mut(CHUNK_ROWS * 16))
                    .for_each(|(i, o)| run(i, o, None));
            }
        }
    } else {
        run(input, out, deriv);
    }
}

/// Batched sigmoid.
pub fn sigmoid_slice(input: &[f64], out: &mut [f64]) {
    let run = |input: &[f64], out: &mut [f64]| {
        for i in 0..input.len() {
            let x = input[i];
            let t = exp_core_nonpos(-x.abs());
            let s = 1.0 / (1.0 + t);
            out[i] = if x >= 0.0 { s } else { 1.0 - s };
        }
    };
    if input.len() >= PAR_THRESHOLD * 16 {
        input
            .par_chunks(CHUNK_ROWS * 16)
            .zip(out.par_chunks_mut(CHUNK_ROWS * 16))
            .for_each(|(i, o)| run(i, o));
    } else {
        run(input, out);
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(x: &[f64], w: &[f64], b: Option<&[f64]>, m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut y = vec![0.0; m * n];
        for r in 0..m {
            for j in 0..n {
                let mut acc = b.map_or(0.0, |b| b[j]);
                for kk in 0..k {
                    acc += x[r * k + kk] * w[kk * n + j];
                }
                y[r * n + j] = acc;
            }
        }
        y
    }

    #[test]
    fn matmul_matches_naive_reference() {
        let (m, k, n) = (37, 19, 11);
        let x: Vec<f64> = (0..m * k).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let w: Vec<f64> = (0..k * n).map(|i| ((i * 104729) % 97) as f64 / 48.0 - 1.0).collect();
        let b: Vec<f64> = (0..n).map(|i| i as f64 / 10.0).collect();
        let mut y = vec![0.0; m * n];
        matmul_bias(&x, &w, Some(&b), &mut y, m, k, n);
        let expect = naive_matmul(&x, &w, Some(&b), m, k, n);
        for (a, e) in y.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let (m, k, n) = (2100, 33, 17);
        let x: Vec<f64> = (0..m * k).map(|i| ((i * 31) % 1009) as f64 / 500.0 - 1.0).collect();
        let w: Vec<f64> = (0..k * n).map(|i| ((i * 17) % 613) as f64 / 300.0 - 1.0).collect();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut y = vec![0.0; m * n];
                matmul_bias(&x, &w, None, &mut y, m, k, n);
                let mut dw = vec![0.0; k * n];
                matmul_dw(&x, &y, &mut dw, m, k, n);
                let mut db = vec![0.0; n];
                bias_grad(&y, &mut db, m, n);
                (y, dw, db, sum_all(&x))
            })
        };
        let (y1, dw1, db1, s1) = run(1);
        let (y4, dw4, db4, s4) = run(4);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&y1), bits(&y4));
        assert_eq!(bits(&dw1), bits(&dw4));
        assert_eq!(bits(&db1), bits(&db4));
        assert_eq!(s1.to_bits(), s4.to_bits());
    }

    #[test]
    fn fast_exp_matches_std_to_sub_ulp_levels() {
        let mut worst = 0.0f64;
        for i in -7450..=7090 {
            let x = i as f64 / 10.0;
            let (a, b) = (fast_exp(x), x.exp());
            if b > 0.0 && b.is_finite() {
                worst = worst.max(((a - b) / b).abs());
            } else {
                assert_eq!(a, b, "at {x}");
            }
        }
        // dense near zero
        for i in -4000..=4000 {
            let x = i as f64 / 1000.0;
            let (a, b) = (fast_exp(x), x.exp());
            worst = worst.max(((a - b) / b).abs());
        }
        assert!(worst < 1e-14, "worst rel err {worst}");
        assert_eq!(fast_exp(0.0), 1.0);
        assert_eq!(fast_exp(f64::NEG_INFINITY.max(-1e9)), 0.0);
        assert_eq!(fast_exp(1e9_f64.min(1e9)), f64::INFINITY);
    }

    #[test]
    fn fast_ln_matches_std() {
        let mut worst = 0.0f64;
        for i in 1..=40_000 {
            let x = i as f64 / 10_000.0; // (0, 4]
            let (a, b) = (fast_ln(x), x.ln());
            let denom = b.abs().max(1e-12);
            worst = worst.max(((a - b) / denom).abs());
        }
        for x in [1e-300, 1e-10, 1.0, std::f64::consts::E, 1e10, 1e300] {
            let (a, b) = (fast_ln(x), x.ln());
            let denom = b.abs().max(1.0);
            worst = worst.max(((a - b) / denom).abs());
        }
        assert!(worst < 1e-14, "worst rel err {worst}");
        assert_eq!(fast_ln(1.0), 0.0);
    }

    #[test]
    fn fast_ln_1p_matches_std_on_unit_interval() {
        let mut worst = 0.0f64;
        for i in 0..=100_000 {
            let t = i as f64 / 100_000.0;
            let (a, b) = (fast_ln_1p(t), t.ln_1p());
            let denom = b.abs().max(1e-16);
            worst = worst.max(((a - b) / denom).abs());
        }
        for t in [1e-320, 1e-18, 1e-16, 2e-16, 1e-8] {
            let (a, b) = (fast_ln_1p(t), t.ln_1p());
            worst = worst.max(((a - b) / b).abs());
        }
        assert!(worst < 1e-14, "worst rel err {worst}");
    }

    #[test]
    fn softplus_at_zero_is_ln_two_to_roundoff() {
        assert!((softplus(0.0) - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert!((softplus(0.0) - 2.0f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(-800.0) < 1e-300);
    }

    #[test]
    fn sigmoid_matches_definition() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
