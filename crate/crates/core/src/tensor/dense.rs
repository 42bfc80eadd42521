use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: (usize, usize),
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: (rows, cols),
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (values.len(), 1),
            });
        }
        Ok(Self {
            shape: (rows, cols),
            values,
        })
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            shape: (1, values.len()),
            values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: (1, 1),
            values: vec![value],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.0
    }

    pub fn cols(&self) -> usize {
        self.shape.1
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

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.shape.1 + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.shape.1 + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape.1;
        &self.values[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == (1, 1)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &DenseTensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &DenseTensor) -> Result<DenseTensor> {
        let (n, k) = self.shape;
        let (k2, m) = other.shape;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape,
                right: other.shape,
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.values[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.values[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(DenseTensor {
            shape: (n, m),
            values: out,
        })
    }

    /// `selfᵀ · other`.
    pub(crate) fn t_matmul(&self, other: &DenseTensor) -> DenseTensor {
        let (n, k) = self.shape;
        let (n2, m) = other.shape;
        debug_assert_eq!(n, n2);
        let mut out = vec![0.0; k * m];
        for i in 0..n {
            let a_row = &self.values[i * k..(i + 1) * k];
            let b_row = &other.values[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        DenseTensor {
            shape: (k, m),
            values: out,
        }
    }

    /// `self · otherᵀ`.
    pub(crate) fn matmul_t(&self, other: &DenseTensor) -> DenseTensor {
        let (n, k) = self.shape;
        let (m, k2) = other.shape;
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.values[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &other.values[j * k..(j + 1) * k];
                out[i * m + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        DenseTensor {
            shape: (n, m),
            values: out,
        }
    }

    pub fn gather_rows(&self, rows: &[usize]) -> DenseTensor {
        let c = self.shape.1;
        let mut values = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        DenseTensor {
            shape: (rows.len(), c),
            values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = DenseTensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = DenseTensor::from_vec(3, 1, vec![1., 0., -1.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.values(), &[-2., -2.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = DenseTensor::zeros(2, 3);
        let b = DenseTensor::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let a = DenseTensor::from_vec(2, 3, vec![1., -2., 3., 0.5, 5., 6.]).unwrap();
        let b = DenseTensor::from_vec(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let at = DenseTensor::from_vec(3, 2, vec![1., 0.5, -2., 5., 3., 6.]).unwrap();
        assert_eq!(a.t_matmul(&b), at.matmul(&b).unwrap());
        let bt = DenseTensor::from_vec(2, 2, vec![1., 3., 2., 4.]).unwrap();
        assert_eq!(b.matmul_t(&b), b.matmul(&bt).unwrap());
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(DenseTensor::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
