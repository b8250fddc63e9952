use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Dense row-major tensor of 64-bit floats.
///
/// Gradient bookkeeping lives on the [`Tape`](super::Tape); a `Tensor` is a
/// plain value and is never mutated once it has been handed to a tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                op: "construct",
                index,
            });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs whose shape is already known to
    /// be consistent. Finiteness is checked in debug builds only.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, op: &'static str) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if cfg!(debug_assertions) {
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                panic!("{op} produced a non-finite value at index {i}");
            }
        }
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n], "zeros")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n], "filled")
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value], "scalar")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], data)
    }

    /// A `1 × n` row vector.
    pub fn row(data: Vec<f64>) -> Result<Self, NumericsError> {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::InvalidShape(vec![r, c]));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data, "identity")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizers and checkpoint loading. Callers must keep
    /// the values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row_slice(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        Self::new(shape, self.data)
    }
}
