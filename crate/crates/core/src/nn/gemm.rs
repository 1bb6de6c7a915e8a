//! Strided single-precision matrix products on top of `matrixmultiply`.

/// A read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> View<'a> {
        View { data, rows, cols, rs: cols, cs: 1 }
    }

    /// `cols` columns starting at `col0` of a row-major matrix with row stride `ld`.
    pub fn columns(data: &'a [f32], rows: usize, ld: usize, col0: usize, cols: usize) -> View<'a> {
        View { data: &data[col0..], rows, cols, rs: ld, cs: 1 }
    }

    pub fn t(self) -> View<'a> {
        View { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = a * b + beta * c` where `c` is `a.rows x b.cols` at row stride `ldc`
/// starting at column `col0`.
pub fn gemm_into(a: View<'_>, b: View<'_>, beta: f32, c: &mut [f32], ldc: usize, col0: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(col0 + n <= ldc);
    assert!((m - 1) * ldc + col0 + n <= c.len(), "output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc + col0..i * ldc + col0 + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above for the full extent
    // the kernel touches, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(col0),
            ldc as isize,
            1,
        );
    }
}

/// Contiguous `c = a * b + beta * c`.
pub fn gemm(a: View<'_>, b: View<'_>, beta: f32, c: &mut [f32]) {
    let n = b.cols;
    gemm_into(a, b, beta, c, n, 0);
}
