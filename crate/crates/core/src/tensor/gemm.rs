//! Thin safe wrapper over `matrixmultiply::dgemm` for strided row-major views.

/// A read-only strided matrix view into a slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Contiguous row-major `rows × cols` matrix starting at `offset`.
    pub fn rm(data: &'a [f64], offset: usize, rows: usize, cols: usize) -> Self {
        View { data, offset, rows, cols, rs: cols, cs: 1 }
    }

    pub fn strided(data: &'a [f64], offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        View { data, offset, rows, cols, rs, cs: 1 }
    }

    /// Transposed view of the same storage.
    pub fn t(self) -> Self {
        View {
            data: self.data,
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "gemm view out of bounds");
        }
    }
}

/// `C = A·B + beta·C` where `C` is a row-major block inside `c` with row stride `rsc`.
pub(crate) fn gemm(a: View<'_>, b: View<'_>, c: &mut [f64], c_off: usize, rsc: usize, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner extent mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let last = c_off + (m - 1) * rsc + (n - 1);
    assert!(last < c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[c_off + i * rsc..c_off + i * rsc + n] {
                *v *= beta;
            }
        }
        return;
    }
    a.check();
    b.check();
    // SAFETY: every index touched by dgemm was bounds-checked above against
    // the underlying slices; `c` is uniquely borrowed and does not alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            1,
        );
    }
}
