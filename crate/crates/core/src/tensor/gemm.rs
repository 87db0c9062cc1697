//! Thin safe wrapper over `matrixmultiply::dgemm`. All matrix products in
//! the tape (forward and backward) funnel through here; transposed operands
//! are expressed through strides so nothing is ever materialized twice.

/// c = beta * c + a * b, where a is m x k and b is k x n under the given
/// (row, col) strides and c is plain row-major m x n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        } else if beta != 1.0 {
            c[..m * n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    debug_assert!(stride_extent(m, k, rsa, csa) <= a.len());
    debug_assert!(stride_extent(k, n, rsb, csb) <= b.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Highest linear index touched by an r x s matrix with the given strides,
/// plus one. Strides here are always non-negative.
fn stride_extent(r: usize, s: usize, rs: isize, cs: isize) -> usize {
    if r == 0 || s == 0 {
        return 0;
    }
    (r - 1) * rs as usize + (s - 1) * cs as usize + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_row_major_product() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, 2, 1, &b, 2, 1, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_b_via_strides() {
        // a * b^T where b is stored row-major 2x3; result 2x2.
        let a = [1.0, 0.0, 2.0, -1.0, 3.0, 1.0]; // 2x3
        let b = [1.0, 1.0, 1.0, 2.0, 0.0, 1.0]; // 2x3, used as 3x2 transpose
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, 3, 1, &b, 1, 3, 0.0, &mut c);
        // row0 . row0 = 1+0+2 = 3, row0 . row1 = 2+0+2 = 4
        // row1 . row0 = -1+3+1 = 3, row1 . row1 = -2+0+1 = -1
        assert_eq!(c, [3.0, 4.0, 3.0, -1.0]);
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0];
        let b = [2.0];
        let mut c = [10.0];
        gemm(1, 1, 1, &a, 1, 1, &b, 1, 1, 1.0, &mut c);
        assert_eq!(c, [12.0]);
    }
}
