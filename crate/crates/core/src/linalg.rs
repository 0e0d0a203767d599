//! Strided matrix views and a GEMM that accumulates in `f64`.
//!
//! Operands are widened to `f64`, multiplied with `matrixmultiply::dgemm`
//! and narrowed back to `f32` on store. `dgemm` is single-threaded here, so
//! results are bit-reproducible.

/// A read-only strided 2-D window into an `f32` buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View<'a> {
    data: &'a [f32],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    /// Row-major `rows x cols` matrix starting at `offset`.
    pub(crate) fn dense(data: &'a [f32], offset: usize, rows: usize, cols: usize) -> Self {
        Self::strided(data, offset, rows, cols, cols, 1)
    }

    pub(crate) fn strided(
        data: &'a [f32],
        offset: usize,
        rows: usize,
        cols: usize,
        rs: usize,
        cs: usize,
    ) -> Self {
        debug_assert!(
            rows == 0 || cols == 0 || offset + (rows - 1) * rs + (cols - 1) * cs < data.len()
        );
        Self {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub(crate) fn rows(&self) -> usize {
        self.rows
    }

    pub(crate) fn cols(&self) -> usize {
        self.cols
    }

    fn widen(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        self.widen_into(&mut out);
        out
    }

    fn widen_into(&self, out: &mut Vec<f64>) {
        out.clear();
        for i in 0..self.rows {
            let base = self.offset + i * self.rs;
            if self.cs == 1 {
                out.extend(self.data[base..base + self.cols].iter().map(|&v| v as f64));
            } else {
                out.extend((0..self.cols).map(|j| self.data[base + j * self.cs] as f64));
            }
        }
    }

}

/// Destination window for [`gemm`].
pub(crate) struct OutView<'a> {
    pub data: &'a mut [f32],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> OutView<'a> {
    pub(crate) fn dense(data: &'a mut [f32], offset: usize, cols: usize) -> Self {
        Self {
            data,
            offset,
            rs: cols,
            cs: 1,
        }
    }
}

// Below this many multiply-adds, packing for dgemm costs more than it saves.
const SMALL_GEMM: usize = 16 * 1024;

thread_local! {
    static SCRATCH: std::cell::RefCell<[Vec<f64>; 3]> = Default::default();
}

/// `out = a·b` (or `out += a·b` when `accumulate`).
pub(crate) fn gemm(a: View<'_>, b: View<'_>, out: OutView<'_>, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    SCRATCH.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let [aw, bw, c] = &mut *bufs;
        a.widen_into(aw);
        b.widen_into(bw);
        c.clear();
        c.resize(m * n, 0.0);
        if m * k * n <= SMALL_GEMM {
            // Row-times-matrix updates; each entry still sums over p in order.
            for (crow, arow) in c.chunks_exact_mut(n).zip(aw.chunks_exact(k.max(1))) {
                for (&av, brow) in arow.iter().zip(bw.chunks_exact(n)) {
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        } else {
            // SAFETY: aw is m*k, bw is k*n and c is m*n, all row-major and contiguous.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    aw.as_ptr(),
                    k as isize,
                    1,
                    bw.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        if out.cs == 1 {
            for (i, crow) in c.chunks_exact(n).enumerate() {
                let base = out.offset + i * out.rs;
                let dst = &mut out.data[base..base + n];
                if accumulate {
                    for (d, &v) in dst.iter_mut().zip(crow) {
                        *d = (*d as f64 + v) as f32;
                    }
                } else {
                    for (d, &v) in dst.iter_mut().zip(crow) {
                        *d = v as f32;
                    }
                }
            }
        } else {
            for i in 0..m {
                for j in 0..n {
                    store(out.data, out.offset + i * out.rs + j * out.cs, c[i * n + j], accumulate);
                }
            }
        }
    });
}

#[inline]
fn store(data: &mut [f32], idx: usize, v: f64, accumulate: bool) {
    let dst = &mut data[idx];
    *dst = if accumulate { (*dst as f64 + v) as f32 } else { v as f32 };
}

/// Dense product of row-major buffers, returning a fresh `m x n` buffer.
pub(crate) fn gemm_new(a: View<'_>, b: View<'_>) -> Vec<f32> {
    let mut out = vec![0.0; a.rows * b.cols];
    let n = b.cols;
    gemm(a, b, OutView::dense(&mut out, 0, n), false);
    out
}

/// Product of three matrices evaluated entirely in `f64`, narrowed once.
pub(crate) fn triple_product(a: View<'_>, b: View<'_>, c: View<'_>) -> Vec<f32> {
    assert_eq!(a.cols, b.rows);
    assert_eq!(b.cols, c.rows);
    let (m, k, n, p) = (a.rows, a.cols, b.cols, c.cols);
    let aw = a.widen();
    let bw = b.widen();
    let cw = c.widen();
    let mut ab = vec![0.0f64; m * n];
    let mut abc = vec![0.0f64; m * p];
    // SAFETY: buffer sizes match the dimensions passed to dgemm.
    unsafe {
        if m > 0 && n > 0 && k > 0 {
            matrixmultiply::dgemm(
                m, k, n, 1.0, aw.as_ptr(), k as isize, 1, bw.as_ptr(), n as isize, 1, 0.0,
                ab.as_mut_ptr(), n as isize, 1,
            );
        }
        if m > 0 && p > 0 && n > 0 {
            matrixmultiply::dgemm(
                m, n, p, 1.0, ab.as_ptr(), n as isize, 1, cw.as_ptr(), p as isize, 1, 0.0,
                abc.as_mut_ptr(), p as isize, 1,
            );
        }
    }
    abc.into_iter().map(|v| v as f32).collect()
}
