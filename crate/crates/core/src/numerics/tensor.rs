use crate::error::{Error, Result};

/// Dense row-major f64 matrix.
///
/// The value type underneath weights, activation batches and gradients.
/// Operations allocate fresh tensors; existing tensors are never mutated by
/// readers, so they are safe to share read-only across client trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "tensor data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor2D { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2D::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// New tensor containing the listed rows, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor2D {
        let mut out = Tensor2D::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`, shapes (m x k) * (k x n) -> (m x n).
    pub fn matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.rows {
            return Err(Error::contract(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2D::zeros(self.rows, other.cols);
        dgemm(
            self.rows,
            self.cols,
            other.cols,
            self,
            [self.cols as isize, 1],
            other,
            [other.cols as isize, 1],
            &mut out,
        );
        Ok(out)
    }

    /// `self * other^T`, shapes (m x k) * (n x k) -> (m x n).
    ///
    /// The hot product in the forward pass: both operands are read along
    /// contiguous rows.
    pub fn matmul_nt(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.cols {
            return Err(Error::contract(format!(
                "matmul_nt shape mismatch: {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2D::zeros(self.rows, other.rows);
        dgemm(
            self.rows,
            self.cols,
            other.rows,
            self,
            [self.cols as isize, 1],
            other,
            [1, other.cols as isize],
            &mut out,
        );
        Ok(out)
    }

    /// `self^T * other`, shapes (k x m)^T * (k x n) -> (m x n).
    pub fn matmul_tn(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.rows != other.rows {
            return Err(Error::contract(format!(
                "matmul_tn shape mismatch: ({}x{})^T * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2D::zeros(self.cols, other.cols);
        dgemm(
            self.cols,
            self.rows,
            other.cols,
            self,
            [1, self.cols as isize],
            other,
            [other.cols as isize, 1],
            &mut out,
        );
        Ok(out)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor2D, scale: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::contract(format!(
                "add_scaled shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Thin wrapper over the blocked GEMM kernel; transposition is expressed
/// through the [row, col] stride pairs.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &Tensor2D,
    sa: [isize; 2],
    b: &Tensor2D,
    sb: [isize; 2],
    out: &mut Tensor2D,
) {
    debug_assert_eq!(out.data.len(), m * n);
    // Safety: shapes are validated by the callers; strides address exactly
    // the tensors' own buffers; `out` is freshly zeroed and uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            sa[0],
            sa[1],
            b.data.as_ptr(),
            sb[0],
            sb[1],
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
