//! Dense kernels: strided GEMM and LU-based inversion.

use crate::error::{Result, TensorError};

/// Borrowed strided view of a row-major buffer.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], row_stride: usize, col_stride: usize) -> Self {
        Mat {
            data,
            row_stride,
            col_stride,
        }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c (m x n, row-major) = a (m x k) * b (k x n)`, or `+=` when `accumulate`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: Mat<'_>,
    b: Mat<'_>,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.data.len() >= span(m, k, a.row_stride, a.col_stride));
    assert!(b.data.len() >= span(k, n, b.row_stride, b.col_stride));
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Inverse of a row-major `n x n` matrix by Gauss-Jordan elimination with
/// partial pivoting. Pivots below `1e-12` times the largest absolute entry
/// are treated as singular.
pub fn invert(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !scale.is_finite() {
        return Err(TensorError::NonFinite("invert"));
    }
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let (piv_row, piv_abs) = (col..n)
            .map(|r| (r, m[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_abs <= tol {
            return Err(TensorError::Singular {
                pivot: piv_abs,
                column: col,
            });
        }
        if piv_row != col {
            for j in 0..n {
                m.swap(col * n + j, piv_row * n + j);
                inv.swap(col * n + j, piv_row * n + j);
            }
        }
        let p = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[r * n + j] -= f * m[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Ok(inv)
}
