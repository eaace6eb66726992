use ndarray::Array2;

use crate::error::{Error, Result};

/// Non-negative per-pixel density grid (objects per pixel). The object count
/// is the total mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    values: Array2<f64>,
}

impl DensityMap {
    /// Wraps a grid, rejecting negative or non-finite entries.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Argument(format!(
                "density values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self { values })
    }

    pub(crate) fn from_raw(values: Array2<f64>) -> Self {
        debug_assert!(values.iter().all(|v| *v >= 0.0));
        Self { values }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Sum of all density values.
    pub fn count(&self) -> f64 {
        self.values.sum()
    }
}

/// Predicted or target count: the density map's total mass.
pub fn count(d: &DensityMap) -> f64 {
    d.count()
}
