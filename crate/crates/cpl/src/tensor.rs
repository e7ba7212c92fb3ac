//! Dense row-major tensors. This is the plain value type used everywhere
//! outside the autodiff tape: synthetic data, parameters between steps,
//! checkpoints. Values are `f64`; gradients, when present, share the shape.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(default)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor::new", format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor::new",
                format!("shape {:?} holds {} elements, data has {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Seeded Gaussian init, mean 0. Identical (seed, shape, std) gives
    /// identical bytes on every run.
    pub fn randn(shape: Vec<usize>, std: f64, seed: u64) -> Self {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, yes: bool) {
        self.requires_grad = yes;
        if !yes {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "gradient must match tensor shape");
        }
        self.grad = grad;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Clamp every element into `[lo, hi]`. Plain value operation used by the
    /// data synthesizer and metric preprocessing; the differentiable forward
    /// path never clips.
    pub fn clip(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data.iter().map(|v| v.clamp(lo, hi)).collect();
        Tensor { shape: self.shape.clone(), data, requires_grad: false, grad: None }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data, requires_grad: false, grad: None }
    }

    /// Elementwise a - b as a value operation (no tape involvement).
    pub fn sub_value(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "tensor::sub_value",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data, requires_grad: false, grad: None })
    }

    pub fn mean_abs_diff(&self, other: &Tensor) -> Result<f64> {
        let d = self.sub_value(other)?;
        Ok(d.data.iter().map(|v| v.abs()).sum::<f64>() / d.data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        let err = Tensor::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn randn_is_reproducible() {
        let a = Tensor::randn(vec![4, 4], 0.02, 7);
        let b = Tensor::randn(vec![4, 4], 0.02, 7);
        assert_eq!(a.data(), b.data());
        let c = Tensor::randn(vec![4, 4], 0.02, 8);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn clip_clamps_and_drops_grad_tracking() {
        let t = Tensor::new(vec![4], vec![-1.0, 0.25, 0.75, 2.0]).unwrap().with_requires_grad();
        let c = t.clip(0.0, 1.0);
        assert_eq!(c.data(), &[0.0, 0.25, 0.75, 1.0]);
        assert!(!c.requires_grad());
    }

    #[test]
    fn finiteness_check() {
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.ensure_finite("test").is_err());
    }
}
