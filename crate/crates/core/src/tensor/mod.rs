//! Dense `f64` tensors, a reverse-mode tape over them, a central-difference
//! gradient oracle and the binary tensor file format.

mod graph;
mod gradcheck;
pub mod io;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use graph::{Gradients, Graph, OpKind, Var};

use crate::error::{Error, Result};

/// A contiguous row-major array of finite `f64` values.
///
/// Tensors are immutable values. Gradient bookkeeping (`requires_grad`,
/// accumulated gradients) lives on the [`Graph`] that records operations on
/// them.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Tensor { shape, data })
    }

    // Callers guarantee shape/data agreement and finiteness.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    /// Builds a 1-D tensor.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Returns a copy with one coordinate replaced.
    pub fn with_value(&self, index: usize, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Numerics(format!("non-finite value {value}")));
        }
        let mut data = self.data.clone();
        data[index] = value;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Elementwise map; fails if the map produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let Some((&rows, rest)) = self.shape.split_first() else {
            return Err(Error::Shape("slice_rows on a scalar".into()));
        };
        if start > end || end > rows {
            return Err(Error::Shape(format!(
                "row range {start}..{end} out of bounds for {rows} rows"
            )));
        }
        let inner: usize = rest.iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * inner..end * inner].to_vec(),
        ))
    }

    /// Gathers rows along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let Some((&n, rest)) = self.shape.split_first() else {
            return Err(Error::Shape("select_rows on a scalar".into()));
        };
        let inner: usize = rest.iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= n {
                return Err(Error::Shape(format!("row {r} out of bounds for {n} rows")));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Concatenates along the leading axis.
    pub fn stack_rows(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("stack_rows of nothing".into()))?;
        if first.rank() == 0 {
            return Err(Error::Shape("stack_rows of scalars".into()));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != first.rank() || p.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "stack_rows: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor::from_parts(shape, data))
    }
}
