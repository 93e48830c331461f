//! Dense row-major `f64` tensors.
//!
//! This is the storage type for parameters, checkpoints, and assets. The
//! differentiation tape works on flat buffers with 2-D `(rows, cols)` views;
//! `Tensor` carries the full N-D shape for serialization and validation.

use crate::error::{Error, Result};

/// A dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating that the value count matches the shape.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::contract("Tensor::new", "zero extent in shape"));
        }
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("{count} values for shape {shape:?}"),
                format!("{} values", values.len()),
            ));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; count],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Hard error if any value is non-finite; `op` names the producer.
    pub fn check_finite(&self, op: &str) -> Result<()> {
        check_finite_slice(op, &self.values)
    }
}

/// Returns a hard error naming `op` if `values` contains NaN or infinity.
///
/// Fast path: a sum is non-finite iff some element is (finite values cannot
/// overflow to infinity at the magnitudes this engine produces), so the
/// per-element scan only runs on failure. Four independent accumulators
/// break the latency chain; any accumulation order detects equally.
pub fn check_finite_slice(op: &str, values: &[f64]) -> Result<()> {
    let n4 = values.len() & !3;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut i = 0;
    while i < n4 {
        s0 += values[i];
        s1 += values[i + 1];
        s2 += values[i + 2];
        s3 += values[i + 3];
        i += 4;
    }
    let mut acc = (s0 + s1) + (s2 + s3);
    while i < values.len() {
        acc += values[i];
        i += 1;
    }
    if acc.is_finite() {
        return Ok(());
    }
    let (index, value) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite())
        .map(|(i, v)| (i, *v))
        .unwrap_or((0, acc));
    Err(Error::NonFinite {
        op: op.to_string(),
        index,
        value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn finite_check_names_op_and_index() {
        let t = Tensor::new(vec![3], vec![1.0, f64::NAN, 2.0]).unwrap();
        let err = t.check_finite("softplus").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("softplus"), "{msg}");
        assert!(msg.contains("index 1"), "{msg}");
    }

    #[test]
    fn finite_check_catches_infinity() {
        assert!(check_finite_slice("x", &[1.0, f64::INFINITY]).is_err());
        assert!(check_finite_slice("x", &[f64::INFINITY, f64::NEG_INFINITY]).is_err());
        assert!(check_finite_slice("x", &[1.0, -2.0]).is_ok());
    }
}
