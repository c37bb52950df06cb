//! Dense row-major float-64 tensors.

use std::fmt;

use super::DiffError;

/// Immutable dense tensor. `shape.iter().product() == data.len()` always holds
/// (an empty shape is a scalar with one element).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::ShapeData { shape, len: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    /// Unchecked constructor for op outputs; length is still asserted.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Result<Self, DiffError> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, DiffError> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DiffError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(DiffError::Dimension {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![1.0; n])
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// `(rows, cols)` view: rank-1 tensors are a single row.
    pub(crate) fn as_matrix(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Some((1, *n)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    /// Row `i` of a rank-2 tensor (or the whole rank-1 tensor for `i == 0`).
    pub fn row(&self, i: usize) -> &[f64] {
        let (_, cols) = self.as_matrix().expect("row() needs rank 1 or 2");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        self.as_matrix().map_or(0, |(r, _)| r)
    }

    pub fn cols(&self) -> usize {
        self.as_matrix().map_or(0, |(_, c)| c)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Selects rows by index into a new rank-2 tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let cols = self.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_parts(vec![indices.len(), cols], data)
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub(crate) fn with_shape(&self, shape: Vec<usize>) -> Tensor {
        Tensor::from_parts(shape, self.data.clone())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Row-major `a[m×k] · b[k×n]`, optionally transposing either operand.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, trans_a: bool, trans_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            if trans_b {
                for (j, o) in out_row.iter_mut().enumerate() {
                    *o += av * b[j * k + p];
                }
            } else {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_mismatched() {
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(DiffError::NonFinite { index: 1 })
        ));
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(DiffError::ShapeData { .. })
        ));
        assert!(Tensor::new(vec![0, 3], vec![]).is_ok());
    }

    #[test]
    fn scalar_has_one_element() {
        let t = Tensor::scalar(2.5).unwrap();
        assert_eq!(t.rank(), 0);
        assert_eq!(t.item(), Some(2.5));
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(gemm(&a, &b, 2, 2, 2, false, false), vec![19.0, 22.0, 43.0, 50.0]);
        // aᵀ b
        assert_eq!(gemm(&a, &b, 2, 2, 2, true, false), vec![26.0, 30.0, 38.0, 44.0]);
        // a bᵀ
        assert_eq!(gemm(&a, &b, 2, 2, 2, false, true), vec![17.0, 23.0, 39.0, 53.0]);
    }
}
