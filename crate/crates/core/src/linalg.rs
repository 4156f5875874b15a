//! Dense row-major matrix storage and the two inner kernels used everywhere.

use crate::error::{Error, Result};

/// Row-major dense `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Copies the selected rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Gathers the selected rows into a column-per-sample (transposed) layout.
    pub fn gather_transposed(&self, idx: &[usize]) -> Mat {
        let s = idx.len();
        let mut out = Mat::zeros(self.cols, s);
        for (j, &src) in idx.iter().enumerate() {
            for (c, &v) in self.row(src).iter().enumerate() {
                out.data[c * s + j] = v;
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    axpy(a, rhs.row(k), out.row_mut(i));
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Fixed-order dot product. Eight independent accumulators let the compiler
/// vectorize while keeping the summation order independent of threading.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sum(x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut it = x.chunks_exact(8);
    for c in &mut it {
        for l in 0..8 {
            acc[l] += c[l];
        }
    }
    let tail: f64 = it.remainder().iter().sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Strided read-only operand: element `(i, p)` lives at
/// `data[off + i * rs + p * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct Strided<'a> {
    pub data: &'a [f64],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Strided<'a> {
    /// Rows `r0..` of a row-major matrix, all columns from `c0`.
    pub fn rows(m: &'a Mat, r0: usize, c0: usize) -> Self {
        Self {
            data: &m.data,
            off: r0 * m.cols + c0,
            rs: m.cols,
            cs: 1,
        }
    }

    /// Transposed view starting at element `(r0, c0)` of `m`: element
    /// `(i, p)` is `m[(r0 + p, c0 + i)]`.
    pub fn transposed(m: &'a Mat, r0: usize, c0: usize) -> Self {
        Self {
            data: &m.data,
            off: r0 * m.cols + c0,
            rs: 1,
            cs: m.cols,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "strided operand out of bounds");
    }
}

/// `C = A B + beta C` for an `m x k` operand `A`, a `k x n` operand `B` and a
/// row-major `C` with row stride `rsc`, using a blocked GEMM kernel. The
/// summation order depends only on the shapes, never on threading.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: Strided<'_>,
    b: Strided<'_>,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        if beta != 1.0 {
            for i in 0..m {
                c[i * rsc..i * rsc + n].iter_mut().for_each(|v| *v *= beta);
            }
        }
        return;
    }
    a.check(m, k);
    b.check(k, n);
    // SAFETY: every index touched by the kernel is bounded by the checks
    // above, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Like [`for_each_row`], but hands out consecutive groups of `chunk_rows`
/// rows (the last group may be shorter).
pub(crate) fn for_each_chunk<F>(data: &mut [f64], row_len: usize, chunk_rows: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    for_each_row(data, row_len * chunk_rows, work, f);
}

/// Runs `f(row_index, row)` over every row of a row-major buffer, in parallel
/// when the estimated work is large enough to amortize scheduling. Each row is
/// written by exactly one closure call, so results do not depend on threading.
pub(crate) fn for_each_row<F>(data: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    if row_len == 0 {
        return;
    }
    if work >= PARALLEL_WORK_THRESHOLD && rayon::current_num_threads() > 1 {
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        for (i, row) in data.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    }
}

const PARALLEL_WORK_THRESHOLD: usize = 1 << 18;

/// Output rows grouped into one GEMM call where the triangular structure
/// allows a shared rectangular operand.
pub(crate) const OUTPUT_TILE: usize = 16;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..21).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..21).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
        assert!((sum(&a) - a.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn gather_transposed_matches_select_then_transpose() {
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let idx = [2, 0];
        assert_eq!(m.gather_transposed(&idx), m.select_rows(&idx).transpose());
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Mat::from_vec(2, 2, vec![1.0; 3]).is_err());
    }
}
