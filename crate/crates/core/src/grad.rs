use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter-shaped accumulator produced by every gradient routine.
///
/// All estimators follow the descent convention: the vector is meant to be
/// *subtracted* from the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(n: usize) -> Self {
        GradientVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|a| *a *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn max_abs_diff(&self, other: &GradientVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.0.iter().position(|a| !a.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what}: coordinate {i} is {}", self.0[i]))),
        }
    }

    /// Sum of a list of gradients; `n` is the parameter count used when the
    /// list is empty.
    pub fn sum<'a>(n: usize, grads: impl IntoIterator<Item = &'a GradientVector>) -> Self {
        let mut acc = GradientVector::zeros(n);
        for g in grads {
            acc.add_scaled(g, 1.0);
        }
        acc
    }
}
