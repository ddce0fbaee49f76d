//! Thin safe wrapper around the f64 GEMM kernel. All tensor contractions
//! (dense matmul, im2col convolution and its backward) funnel through
//! here so there is exactly one unsafe block to audit.

/// `c = alpha * a @ b + beta * c` with explicit row/column strides
/// (all matrices dense, strides in elements, non-negative).
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. Passing swapped
/// strides expresses a transposed operand without copying it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Highest element touched must exist; catches stride mistakes early.
    let need = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(need(m, k, rsa, csa) <= a.len(), "gemm: operand a too short");
    assert!(need(k, n, rsb, csb) <= b.len(), "gemm: operand b too short");
    assert!(need(m, n, rsc, csc) <= c.len(), "gemm: output c too short");

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
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain row-major `a[m x k] @ b[k x n]`.
    fn matmul_rm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        dgemm_rm(m, k, n, 1.0, a, k, 1, b, n, 1, 0.0, &mut c, n, 1);
        c
    }

    #[test]
    fn two_by_two() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let c = matmul_rm(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_operand_via_strides() {
        // a @ b^T where b is stored row-major [2 x 3]: strides swapped.
        let a = [1.0, 2.0, 3.0]; // 1 x 3
        let b = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0]; // 2 x 3
        let mut c = vec![0.0; 2];
        dgemm_rm(1, 3, 2, 1.0, &a, 3, 1, &b, 1, 3, 0.0, &mut c, 2, 1);
        assert_eq!(c, vec![4.0, 5.0]);
    }
}
