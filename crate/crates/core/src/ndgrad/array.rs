use crate::error::{ensure, Result};

use super::Scalar;

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Array<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        ensure!(!shape.is_empty(), "array shape must have at least one dimension");
        ensure!(shape.iter().all(|&d| d > 0), "array dimensions must be positive, got {shape:?}");
        let n: usize = shape.iter().product();
        ensure!(n == data.len(), "shape {shape:?} holds {n} elements but data has {}", data.len());
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "bad shape {shape:?}");
        let n = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: F) -> Self {
        Array { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Single element of a one-element array.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<G: Scalar>(&self) -> Array<G> {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|v| G::of(v.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks `[1, ...]`-compatible rows into a leading batch axis.
    pub fn stack(rows: &[Array<F>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "cannot stack zero arrays");
        let inner = rows[0].shape.clone();
        let mut data = Vec::with_capacity(rows.len() * rows[0].len());
        for r in rows {
            ensure!(r.shape == inner, "stack shape mismatch: {:?} vs {:?}", r.shape, inner);
            data.extend_from_slice(&r.data);
        }
        let mut shape = vec![rows.len()];
        shape.extend(inner);
        Self::new(shape, data)
    }
}
