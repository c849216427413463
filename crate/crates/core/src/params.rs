//! Flat trainable parameter vectors with a named block layout.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::linalg::DenseMatrix;

pub const LOG_SIGMA: &str = "log_sigma";
pub const LOG_LAMBDA: &str = "log_lambda";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous partition of a flat index space into named matrix
/// blocks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    blocks: Vec<ParamBlock>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<()> {
        let name = name.into();
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(FedError::LayoutMismatch(format!("duplicate block `{name}`")));
        }
        let offset = self.len();
        self.blocks.push(ParamBlock { name, offset, rows, cols });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Checks that blocks tile `0..len` exactly once, in order.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for b in &self.blocks {
            if b.offset != next {
                return Err(FedError::LayoutMismatch(format!(
                    "block `{}` starts at {} but previous block ended at {next}",
                    b.name, b.offset
                )));
            }
            next += b.len();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    layout: ParamLayout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn from_values(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        layout.validate()?;
        if values.len() != layout.len() {
            return Err(FedError::LayoutMismatch(format!(
                "{} values for a layout of length {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block(&self, name: &str) -> Result<&[f64]> {
        let b = self.layout.block(name).ok_or_else(|| FedError::LayoutMismatch(format!("no block `{name}`")))?;
        Ok(&self.values[b.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let b = self.layout.block(name).ok_or_else(|| FedError::LayoutMismatch(format!("no block `{name}`")))?.clone();
        Ok(&mut self.values[b.range()])
    }

    pub fn block_matrix(&self, name: &str) -> Result<DenseMatrix> {
        let b = self.layout.block(name).ok_or_else(|| FedError::LayoutMismatch(format!("no block `{name}`")))?;
        DenseMatrix::new(b.rows, b.cols, self.values[b.range()].to_vec())
    }

    pub fn log_sigma(&self) -> Result<f64> {
        Ok(self.block(LOG_SIGMA)?[0])
    }

    pub fn log_lambda(&self) -> Result<f64> {
        Ok(self.block(LOG_LAMBDA)?[0])
    }

    /// Noise standard deviation `exp(log_sigma)`.
    pub fn sigma(&self) -> Result<f64> {
        Ok(self.log_sigma()?.exp())
    }

    /// Prior standard deviation `exp(log_lambda)`.
    pub fn lambda(&self) -> Result<f64> {
        Ok(self.log_lambda()?.exp())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.layout == other.layout
    }

    pub fn ensure_same_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(FedError::LayoutMismatch("parameter layouts differ".into()))
        }
    }

    /// `self += step * direction`.
    pub fn add_scaled(&mut self, step: f64, direction: &Self) -> Result<()> {
        self.ensure_same_layout(direction)?;
        for (v, d) in self.values.iter_mut().zip(&direction.values) {
            *v += step * d;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_partitions_indices() {
        let mut l = ParamLayout::new();
        l.push("w", 2, 3).unwrap();
        l.push(LOG_SIGMA, 1, 1).unwrap();
        l.push(LOG_LAMBDA, 1, 1).unwrap();
        l.validate().unwrap();
        assert_eq!(l.len(), 8);
        assert_eq!(l.block(LOG_SIGMA).unwrap().range(), 6..7);
        assert!(l.push("w", 1, 1).is_err());
    }

    #[test]
    fn positive_hyperparameters_from_logs() {
        let mut l = ParamLayout::new();
        l.push(LOG_SIGMA, 1, 1).unwrap();
        l.push(LOG_LAMBDA, 1, 1).unwrap();
        let p = ParamVector::from_values(l, vec![-50.0, 2.0]).unwrap();
        assert!(p.sigma().unwrap() > 0.0);
        assert!((p.lambda().unwrap() - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn wrong_length_rejected() {
        let mut l = ParamLayout::new();
        l.push("a", 2, 2).unwrap();
        assert!(matches!(ParamVector::from_values(l, vec![1.0; 3]), Err(FedError::LayoutMismatch(_))));
    }
}
