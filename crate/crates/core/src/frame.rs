use crate::error::{Error, Result};
use crate::real::Real;

/// A sequence of `rows` frames, each a vector of `dim` reals, stored
/// frame-major so that any run of consecutive frames is one contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix<F = f32> {
    rows: usize,
    dim: usize,
    data: Vec<F>,
}

impl<F: Real> FrameMatrix<F> {
    pub fn new(rows: usize, dim: usize, data: Vec<F>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::shape(format!(
                "frame matrix must be non-empty, got {rows}x{dim}"
            )));
        }
        if data.len() != rows * dim {
            return Err(Error::shape(format!(
                "frame matrix {rows}x{dim} needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "non-finite value at frame {}, dimension {}",
                i / dim,
                i % dim
            )));
        }
        Ok(FrameMatrix { rows, dim, data })
    }

    /// Builds a matrix from per-frame rows of equal length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("ragged frame rows"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    /// Internal constructor for intermediate activations; shape is trusted.
    pub(crate) fn from_raw(rows: usize, dim: usize, data: Vec<F>) -> Self {
        debug_assert_eq!(data.len(), rows * dim);
        FrameMatrix { rows, dim, data }
    }

    pub(crate) fn zeros(rows: usize, dim: usize) -> Self {
        FrameMatrix {
            rows,
            dim,
            data: vec![F::zero(); rows * dim],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[F] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn cast<G: Real>(&self) -> FrameMatrix<G> {
        FrameMatrix {
            rows: self.rows,
            dim: self.dim,
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}
