/// Row/column strides of a matrix operand stored in a flat slice.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub rows: isize,
    pub cols: isize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Layout {
            rows: cols as isize,
            cols: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Layout {
            rows: 1,
            cols: cols as isize,
        }
    }

    fn max_offset(&self, r: usize, c: usize) -> usize {
        if r == 0 || c == 0 {
            return 0;
        }
        (r - 1) * self.rows as usize + (c - 1) * self.cols as usize
    }
}

/// `c = a · b + beta · c`, with `a` m×k, `b` k×n and `c` row-major m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm: output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(la.max_offset(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(lb.max_offset(k, n) < b.len(), "gemm: rhs out of bounds");
    // SAFETY: every index the kernel touches was bounds-checked above and the
    // output does not alias either input (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rows,
            la.cols,
            b.as_ptr(),
            lb.rows,
            lb.cols,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
