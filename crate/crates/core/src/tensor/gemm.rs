/// Strided 2-D operand view: `(buffer, row_stride, col_stride)`.
pub(crate) type View<'a> = (&'a [f64], isize, isize);

/// `c[m,n] += a[m,k] · b[k,n]` for arbitrarily strided `a` and `b`; `c` is
/// dense row-major.
pub fn matmul_into(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let max_off = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs
        }
    };
    assert!(a.1 >= 0 && a.2 >= 0 && b.1 >= 0 && b.2 >= 0);
    assert!(k == 0 || (max_off(m, k, a.1, a.2) as usize) < a.0.len());
    assert!(k == 0 || (max_off(k, n, b.1, b.2) as usize) < b.0.len());
    // SAFETY: bounds of every strided access were checked above; `c` is dense
    // with at least m*n elements and does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
