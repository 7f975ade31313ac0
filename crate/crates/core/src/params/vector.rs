use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// A flat, ordered vector of model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(data: Vec<f64>) -> Self {
        ParamVector(data)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `self += coef * other`, elementwise.
    pub fn axpy(&mut self, coef: f64, other: &[f64]) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (dst, &src) in self.0.iter_mut().zip(other) {
            *dst += coef * src;
        }
        Ok(())
    }

    pub fn dot(&self, other: &[f64]) -> Result<f64> {
        check_len(self.len(), other.len())?;
        Ok(dot(&self.0, other))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &ParamVector) -> bool {
        self.len() == other.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch { expected, actual });
    }
    Ok(())
}

/// Left-to-right dot product. Callers guarantee equal lengths.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `base + Σ coef_j · vec_j`, accumulated per element in list order.
pub fn linear_combine(base: &[f64], terms: &[(f64, &[f64])]) -> Result<ParamVector> {
    for (_, v) in terms {
        check_len(base.len(), v.len())?;
    }
    let mut out = base.to_vec();
    for (i, o) in out.iter_mut().enumerate() {
        for (coef, v) in terms {
            *o += coef * v[i];
        }
    }
    let out = ParamVector(out);
    if !out.is_finite() {
        return Err(Error::NonFinite("linear_combine"));
    }
    Ok(out)
}
