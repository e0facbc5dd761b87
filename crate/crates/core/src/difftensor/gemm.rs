//! Thin strided-GEMM wrapper over `matrixmultiply`.

/// Strided view of a row-major buffer as an `rows x cols` matrix.
#[derive(Clone, Copy, Debug)]
pub struct Mat<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    /// Contiguous row-major matrix with `cols` columns starting at `offset`.
    pub fn rm(data: &'a [f64], offset: usize, cols: usize) -> Self {
        Self { data, offset, rs: cols as isize, cs: 1 }
    }

    /// Transposed view of a contiguous row-major matrix with `cols` columns.
    pub fn tr(data: &'a [f64], offset: usize, cols: usize) -> Self {
        Self { data, offset, rs: 1, cs: cols as isize }
    }

    pub fn strided(data: &'a [f64], offset: usize, rs: usize, cs: usize) -> Self {
        Self { data, offset, rs: rs as isize, cs: cs as isize }
    }
}

/// Strided mutable output matrix.
pub struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatMut<'a> {
    pub fn rm(data: &'a mut [f64], offset: usize, cols: usize) -> Self {
        Self { data, offset, rs: cols as isize, cs: 1 }
    }

    pub fn strided(data: &'a mut [f64], offset: usize, rs: usize, cs: usize) -> Self {
        Self { data, offset, rs: rs as isize, cs: cs as isize }
    }
}

fn last_index(offset: usize, rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return offset;
    }
    offset + (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

/// `c = alpha * a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`.
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: Mat, b: Mat, beta: f64, c: MatMut) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // matrixmultiply leaves c untouched for k == 0; apply beta by hand.
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs as usize + j * c.cs as usize;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    assert!(last_index(a.offset, m, k, a.rs, a.cs) < a.data.len(), "gemm: a out of bounds");
    assert!(last_index(b.offset, k, n, b.rs, b.cs) < b.data.len(), "gemm: b out of bounds");
    assert!(last_index(c.offset, m, n, c.rs, c.cs) < c.data.len(), "gemm: c out of bounds");
    // SAFETY: all three index ranges were bounds-checked above and `c` is
    // uniquely borrowed, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs,
            c.cs,
        );
    }
}
