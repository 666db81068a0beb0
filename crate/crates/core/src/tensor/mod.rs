//! Dense tensors and a minimal reverse-mode automatic differentiation tape.
//!
//! Tensors are row-major `f64` arrays. Operations that act "per row" treat every tensor as
//! a matrix whose column count is the size of the last axis and whose row count is the
//! product of the leading axes, so a rank-1 tensor is a single row and a scalar (`shape
//! == []`) is a 1×1 matrix.

mod graph;
mod kernels;

pub use graph::{Graph, RecordEntry, Var};

#[cfg(feature = "fault-injection")]
pub use graph::fault;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// `out[r][k] = self[r][idx[r][k]]` on plain values.
    pub fn gather_last_axis(&self, idx: &Indices) -> Result<Tensor> {
        let cols = self.cols();
        if idx.rows() != self.rows() || idx.data().iter().any(|&i| i >= cols) {
            return Err(Error::shape(
                "gather_last_axis",
                format!("{}x{} indices for {:?}", idx.rows(), idx.cols(), self.shape),
            ));
        }
        let mut data = Vec::with_capacity(idx.data().len());
        for r in 0..idx.rows() {
            let row = self.row(r);
            data.extend(idx.row(r).iter().map(|&i| row[i]));
        }
        Tensor::matrix(idx.rows(), idx.cols(), data)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(Error::shape(
                "transpose",
                format!("expected a matrix, got {:?}", self.shape),
            ));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Tensor {
            shape: vec![c, r],
            data: kernels::transpose(&self.data, r, c),
        })
    }

    /// `self · other` for two matrices.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", self.shape, other.shape)));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        Ok(Tensor {
            shape: vec![m, n],
            data: kernels::matmul(&self.data, &other.data, m, k, n),
        })
    }

    /// `self · otherᵀ`, the Gram-style product used for similarity matrices.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.shape[1] != other.shape[1] {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[0]);
        Ok(Tensor {
            shape: vec![m, n],
            data: kernels::matmul_bt(&self.data, &other.data, m, k, n),
        })
    }
}

/// Integer index matrix produced by sorting and consumed by gathers. Never differentiated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Indices {
    rows: usize,
    cols: usize,
    data: Vec<usize>,
}

impl Indices {
    pub fn new(rows: usize, cols: usize, data: Vec<usize>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "indices",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Indices { rows, cols, data })
    }

    /// The same column permutation repeated for every row.
    pub fn repeat_row(rows: usize, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows * perm.len());
        for _ in 0..rows {
            data.extend_from_slice(perm);
        }
        Indices {
            rows,
            cols: perm.len(),
            data,
        }
    }

    /// One index per row, e.g. the diagonal `[0, 1, ..., n-1]` as an n×1 matrix.
    pub fn column(idx: Vec<usize>) -> Self {
        Indices {
            rows: idx.len(),
            cols: 1,
            data: idx,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }
}

/// Stable descending argsort of every row. Ties keep their original order.
pub fn argsort_desc_stable(t: &Tensor) -> Result<Indices> {
    if t.data().iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("sort_desc_stable: input contains NaN"));
    }
    let (rows, cols) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(rows * cols);
    let mut idx: Vec<usize> = Vec::with_capacity(cols);
    for r in 0..rows {
        let row = t.row(r);
        idx.clear();
        idx.extend(0..cols);
        // `sort_by` is stable; NaN was rejected above so partial_cmp is total here.
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("NaN filtered"));
        data.extend_from_slice(&idx);
    }
    Indices::new(rows, cols, data)
}
