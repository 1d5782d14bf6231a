//! Dense row-major `f32` tensors.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!("non-finite value at index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| v * factor).collect())
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(logits: &Tensor) -> Tensor {
    Tensor::from_parts(logits.shape.clone(), softmax_slice(logits.data()))
}

pub fn softmax_slice(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(values: &[f32]) -> Tensor {
        Tensor::new(vec![values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = softmax(&logits(&[0.0, 0.0]));
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_saturates() {
        let p = softmax(&logits(&[30.0, 10.0]));
        assert!(p.data()[0] as f64 >= 1.0 - 1e-8);
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&logits(&[1.0, -1.0]));
        let e2 = 2f64.exp();
        assert!((p.data()[0] as f64 - e2 / (1.0 + e2)).abs() < 1e-4);
        assert!((p.data()[0] - 0.8808).abs() < 1e-4);
        assert!((p.data()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn softmax_sums_to_one_for_large_logits() {
        let p = softmax(&logits(&[1000.0, 999.0, -1000.0]));
        let total: f32 = p.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_shapes_and_non_finite_data() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![0.0, f32::NAN]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }
}
