//! Flat real-valued tensors with an explicit shape.
//!
//! A [`Sample`] represents clean data points, noised states, noise draws and
//! latent points interchangeably: a row-major `f64` buffer plus its shape.
//! Constructors validate that the shape matches the buffer and that every
//! entry is finite; the arithmetic helpers assume validated inputs and are
//! re-checked only at explicit guard points (inversion loops, training).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Sample {
    /// Builds a sample, validating shape/length agreement and finiteness.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec(format!(
                "sample shape {shape:?} contains a zero dimension"
            )));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: vec![values.len()],
            });
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample entry {bad}")));
        }
        Ok(Sample { shape, values })
    }

    /// 1-D sample over `values`.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Sample::new(vec![n], values)
    }

    /// Single-element sample of shape `[1]`.
    pub fn scalar(v: f64) -> Result<Self> {
        Sample::new(vec![1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Sample {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
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

    pub fn same_shape(&self, other: &Sample) -> bool {
        self.shape == other.shape
    }

    pub(crate) fn check_same_shape(&self, other: &Sample) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise map; the caller is responsible for keeping values finite.
    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Sample {
        Sample {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped samples.
    pub(crate) fn zip(&self, other: &Sample, f: impl Fn(f64, f64) -> f64) -> Result<Sample> {
        self.check_same_shape(other)?;
        Ok(Sample {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Sample {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Sample) -> Result<Sample> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Sample) -> Result<Sample> {
        self.zip(other, |a, b| a - b)
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &Sample, s: f64) -> Result<Sample> {
        self.zip(other, |a, b| a + s * b)
    }

    pub fn dot(&self, other: &Sample) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean squared difference per element.
    pub fn mse(&self, other: &Sample) -> Result<f64> {
        self.check_same_shape(other)?;
        let n = self.values.len() as f64;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Fails with [`Error::NonFinite`] if any entry is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

/// Stacks same-shaped samples into one batch tensor of shape `[n, ...]`.
pub fn stack(samples: &[Sample]) -> Result<Sample> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyInput("stack of zero samples".into()))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.shape());
    let mut values = Vec::with_capacity(samples.len() * first.len());
    for s in samples {
        first.check_same_shape(s)?;
        values.extend_from_slice(s.values());
    }
    Sample::new(shape, values)
}

/// Splits a batch tensor of shape `[n, ...]` back into its rows.
pub fn unstack(batch: &Sample) -> Result<Vec<Sample>> {
    if batch.shape().len() < 2 {
        return Err(Error::InvalidSpec(format!(
            "cannot unstack tensor of shape {:?}",
            batch.shape()
        )));
    }
    let n = batch.shape()[0];
    let row_shape: Vec<usize> = batch.shape()[1..].to_vec();
    let row_len: usize = row_shape.iter().product();
    (0..n)
        .map(|i| {
            Sample::new(
                row_shape.clone(),
                batch.values()[i * row_len..(i + 1) * row_len].to_vec(),
            )
        })
        .collect()
}
