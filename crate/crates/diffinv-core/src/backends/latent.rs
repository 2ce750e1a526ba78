//! Latent tensors moved through the diffusion backend.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// A latent-space tensor. Shape is backend-defined (the mock uses `[4, 4]`);
/// all arithmetic here is elementwise and shape-checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub values: ArrayD<f64>,
}

impl Latent {
    pub fn new(values: ArrayD<f64>) -> Self {
        Latent { values }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Latent { values: ArrayD::zeros(IxDyn(shape)) }
    }

    /// Elementwise draws from the standard normal distribution.
    pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Latent {
            values: ArrayD::from_shape_vec(IxDyn(shape), values)
                .expect("shape product matches element count"),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy of the elements in logical (row-major) order.
    pub fn to_flat(&self) -> Array1<f64> {
        Array1::from_iter(self.values.iter().copied())
    }

    /// Rebuild a latent of the given shape from a flat vector.
    pub fn from_flat(shape: &[usize], flat: Array1<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if flat.len() != expected {
            return Err(Error::LatentShapeMismatch {
                expected: shape.to_vec(),
                got: vec![flat.len()],
            });
        }
        Ok(Latent {
            values: ArrayD::from_shape_vec(IxDyn(shape), flat.to_vec())
                .expect("length checked above"),
        })
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean squared difference over elements.
    pub fn mse(&self, other: &Latent) -> Result<f64> {
        check_same_shape(self, other)?;
        let n = self.len() as f64;
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub fn max_abs_diff(&self, other: &Latent) -> Result<f64> {
        check_same_shape(self, other)?;
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

pub(crate) fn check_same_shape(a: &Latent, b: &Latent) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::LatentShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}
