use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real vector. Models, directions, gradients and projection vectors
/// are all stored this way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(Vec<f64>);

/// A model is a flat parameter vector.
pub type Model = DenseVector;

impl DenseVector {
    /// Checked constructor: non-empty with finite entries.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidDimension(0));
        }
        if let Some(i) = entries.iter().position(|x| !x.is_finite()) {
            return Err(crate::error::invalid(
                "entries",
                format!("entry {i} is not finite"),
            ));
        }
        Ok(Self(entries))
    }

    /// Unchecked constructor.
    pub fn from_vec(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.0.get(i).copied()
    }

    pub fn set(&mut self, i: usize, value: f64) -> Result<()> {
        let dim = self.dim();
        match self.0.get_mut(i) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(Error::DimensionMismatch {
                expected: dim,
                actual: i + 1,
            }),
        }
    }

    pub fn check_dim(&self, other: &DenseVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &DenseVector) -> Result<DenseVector> {
        self.check_dim(other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn sub(&self, other: &DenseVector) -> Result<DenseVector> {
        self.check_dim(other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn scale(&self, factor: f64) -> DenseVector {
        Self(self.0.iter().map(|a| a * factor).collect())
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: f64, other: &DenseVector) -> Result<()> {
        self.check_dim(other)?;
        axpy(&mut self.0, factor, &other.0);
        Ok(())
    }

    pub fn dot(&self, other: &DenseVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn l2_norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(acc: &mut [f64], factor: f64, x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += factor * b;
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
