//! Central finite-difference gradient verification.
//!
//! The checker perturbs sampled coordinates of each parameter by ±ε,
//! re-evaluates the loss, and compares `(f(p+ε) − f(p−ε)) / 2ε` against the
//! analytic gradient stored on the parameter. It is the independent oracle
//! for every backward rule in the engine.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng;

/// Default central-difference step in 64-bit.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Worst relative error observed for one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub worst_rel_err: f64,
    pub coords_checked: usize,
}

/// Compare analytic gradients (already accumulated in `params`) against
/// central finite differences of `loss`. For each parameter up to
/// `max_coords` coordinates are sampled (seeded, deterministic). Returns the
/// per-parameter worst relative errors, with the relative error defined as
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check(
    params: &mut ParamSet,
    mut loss: impl FnMut(&ParamSet) -> Result<f64>,
    epsilon: f64,
    max_coords: usize,
    seed: u64,
) -> Result<Vec<ParamCheck>> {
    if epsilon <= 0.0 {
        return Err(Error::contract("finite_diff_check", "epsilon must be positive"));
    }
    let mut rng = rng::stream(seed, "finite-diff-coords");
    let mut report = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let id = crate::params::ParamId(pi);
        let count = params.get(id).tensor.len();
        let coords: Vec<usize> = if count <= max_coords {
            (0..count).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..count)).collect()
        };
        let name = params.get(id).name.clone();
        let mut worst = 0.0f64;
        for &ci in &coords {
            let original = params.get(id).tensor.values()[ci];
            params.get_mut(id).tensor.values_mut()[ci] = original + epsilon;
            let f_plus = loss(params)?;
            params.get_mut(id).tensor.values_mut()[ci] = original - epsilon;
            let f_minus = loss(params)?;
            params.get_mut(id).tensor.values_mut()[ci] = original;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("finite_diff_check({name})"),
                    index: ci,
                    value: if f_plus.is_finite() { f_minus } else { f_plus },
                });
            }
            let numeric = (f_plus - f_minus) / (2.0 * epsilon);
            let analytic = params.get(id).grad.values()[ci];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        report.push(ParamCheck {
            name,
            worst_rel_err: worst,
            coords_checked: coords.len(),
        });
    }
    Ok(report)
}

/// Largest relative error across a report.
pub fn worst_of(report: &[ParamCheck]) -> f64 {
    report.iter().map(|c| c.worst_rel_err).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_loss_is_exact_to_roundoff() {
        // loss = sum p^2; analytic grad known; FD on quadratics is exact up
        // to floating-point roundoff.
        let mut params = ParamSet::new();
        params.add("p", Tensor::new(vec![3], vec![0.7, -1.3, 2.4]).unwrap()).unwrap();
        for (g, v) in params.get_mut(ParamId(0)).grad.values_mut().iter_mut().zip([0.7, -1.3, 2.4]) {
            *g = 2.0 * v;
        }
        let report = finite_diff_check(
            &mut params,
            |p| Ok(p.get(ParamId(0)).tensor.values().iter().map(|v| v * v).sum()),
            DEFAULT_EPSILON,
            16,
            0,
        )
        .unwrap();
        assert!(worst_of(&report) < 1e-9, "worst {}", worst_of(&report));
    }

    #[test]
    fn tape_backward_agrees_with_fd_on_composed_graph() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::new(vec![4, 3], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()).unwrap()).unwrap();
        params.add("b", Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap()).unwrap();
        let x: Vec<f64> = vec![0.4, -0.7, 1.2, 0.3];

        let forward = |p: &ParamSet| -> Result<(Tape, crate::tape::BufId, Vec<crate::tape::BufId>)> {
            let mut tape = Tape::new();
            let ids = p.register_on(&mut tape)?;
            let xl = tape.leaf(x.clone(), 1, 4)?;
            let y = tape.linear(xl, ids[0], Some(ids[1]))?;
            let a = tape.activation(y, crate::tape::ActKind::Softplus)?;
            let sq = tape.mul(a, a)?;
            let root = tape.mean_all(sq)?;
            Ok((tape, root, ids))
        };

        let (mut tape, root, ids) = forward(&params).unwrap();
        tape.backward(root).unwrap();
        params.accumulate_grads(&tape, &ids);

        let report = finite_diff_check(
            &mut params,
            |p| {
                let (tape, root, _) = forward(p)?;
                Ok(tape.scalar_value(root))
            },
            DEFAULT_EPSILON,
            32,
            1,
        )
        .unwrap();
        assert!(worst_of(&report) < 1e-7, "worst {}", worst_of(&report));
    }

    #[test]
    fn non_finite_loss_is_a_hard_error() {
        let mut params = ParamSet::new();
        params.add("p", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let err = finite_diff_check(&mut params, |_| Ok(f64::NAN), DEFAULT_EPSILON, 4, 0);
        assert!(err.is_err());
    }
}
