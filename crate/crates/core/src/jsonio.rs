//! Row-major matrix/vector documents shared by every JSON surface of the
//! crate (weight sets, cost specs, checkpoints).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A dense matrix with explicit shape fields, stored row-major.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixDoc {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixDoc {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Serde(format!(
                "matrix document claims {}x{} but carries {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// A vector document; kept separate from [`MatrixDoc`] so schemas stay explicit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VectorDoc {
    pub len: usize,
    pub data: Vec<f64>,
}

impl VectorDoc {
    pub fn from_vector(v: &DVector<f64>) -> Self {
        VectorDoc {
            len: v.len(),
            data: v.iter().copied().collect(),
        }
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        if self.data.len() != self.len {
            return Err(Error::Serde(format!(
                "vector document claims length {} but carries {} entries",
                self.len,
                self.data.len()
            )));
        }
        Ok(DVector::from_vec(self.data.clone()))
    }
}
