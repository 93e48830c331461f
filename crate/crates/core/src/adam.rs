//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Optimizer state: one first/second moment tensor per parameter, in the
/// parameter set's registration order, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect(),
        }
    }

    /// One update from the gradients currently stored in `params`.
    /// Gradients are left intact; call `params.zero_grads()` to clear them.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::contract("adam_step", "state does not match parameter set"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].values_mut();
            let v = self.v[i].values_mut();
            let g = p.grad.values();
            let vals = p.tensor.values_mut();
            for j in 0..vals.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                vals[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.tensor.check_finite("adam_step")?;
        }
        Ok(())
    }

    pub fn moments(&self, index: usize) -> (&Tensor, &Tensor) {
        (&self.m[index], &self.v[index])
    }

    pub fn moments_mut(&mut self, index: usize) -> (&mut Tensor, &mut Tensor) {
        (&mut self.m[index], &mut self.v[index])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(value: f64) -> ParamSet {
        let mut set = ParamSet::new();
        set.add("p", Tensor::new(vec![1], vec![value]).unwrap()).unwrap();
        set
    }

    #[test]
    fn first_step_has_lr_magnitude() {
        // Bias-corrected first step: |dp| = lr * g / (|g| + eps') ~ lr.
        for g in [0.3, -2.0, 1e4] {
            let mut set = scalar_set(1.0);
            set.get_mut(crate::params::ParamId(0)).grad.values_mut()[0] = g;
            let mut adam = AdamState::new(&set, 1e-4);
            adam.step(&mut set).unwrap();
            let dp = set.get(crate::params::ParamId(0)).tensor.values()[0] - 1.0;
            assert!((dp.abs() - 1e-4).abs() < 1e-8, "g={g}, dp={dp}");
            assert_eq!(dp.signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut set = scalar_set(1.5);
        let mut adam = AdamState::new(&set, 1e-2);
        adam.step(&mut set).unwrap();
        assert_eq!(set.get(crate::params::ParamId(0)).tensor.values()[0], 1.5);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(p) = (p - 3)^2, p0 = 0, lr = 0.1, 200 steps -> |p - 3| < 0.1
        let mut set = scalar_set(0.0);
        let mut adam = AdamState::new(&set, 0.1);
        for _ in 0..200 {
            let p = set.get(crate::params::ParamId(0)).tensor.values()[0];
            set.get_mut(crate::params::ParamId(0)).grad.values_mut()[0] = 2.0 * (p - 3.0);
            adam.step(&mut set).unwrap();
            set.zero_grads();
        }
        let p = set.get(crate::params::ParamId(0)).tensor.values()[0];
        assert!((p - 3.0).abs() < 0.1, "p={p}");
    }

    #[test]
    fn gradients_left_intact_until_zeroed() {
        let mut set = scalar_set(0.0);
        set.get_mut(crate::params::ParamId(0)).grad.values_mut()[0] = 2.0;
        let mut adam = AdamState::new(&set, 1e-3);
        adam.step(&mut set).unwrap();
        assert_eq!(set.get(crate::params::ParamId(0)).grad.values()[0], 2.0);
        set.zero_grads();
        assert_eq!(set.get(crate::params::ParamId(0)).grad.values()[0], 0.0);
    }
}
