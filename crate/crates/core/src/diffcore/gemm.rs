//! Thin safe wrapper over `matrixmultiply::dgemm` for the row-major and
//! transposed layouts the tape needs.

/// Describes how a logical `rows x cols` operand is laid out in memory.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Layout {
    /// Row-major with leading dimension equal to `cols`.
    N,
    /// Stored as the row-major transpose (i.e. `cols x rows`).
    T,
}

impl Layout {
    fn strides(self, rows: usize, cols: usize) -> (isize, isize) {
        match self {
            Layout::N => (cols as isize, 1),
            Layout::T => (1, rows as isize),
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k`,
/// `op(b)` of shape `k x n` and `c` row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: out too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = la.strides(m, k);
    let (rsb, csb) = lb.strides(k, n);
    // SAFETY: bounds asserted above; strides describe the asserted extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fully strided `c = alpha * a * b + beta * c`; `a` is `m x k`, `b` is
/// `k x n`, strides are (row, col) in elements. `c` has unit column stride.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(
        rsc >= n && c.len() > last(m, n, rsc, 1),
        "gemm: out too short"
    );
    if k == 0 {
        for r in 0..m {
            c[r * rsc..r * rsc + n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    assert!(a.len() > last(m, k, rsa, csa), "gemm: lhs too short");
    assert!(b.len() > last(k, n, rsb, csb), "gemm: rhs too short");
    // SAFETY: the largest index reached through each stride pair is asserted
    // in bounds above, and `c` rows do not overlap since `rsc >= n`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}
