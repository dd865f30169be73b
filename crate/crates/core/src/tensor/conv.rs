//! GEMM wrapper and the im2col/col2im kernels behind conv2d and its
//! transpose. All images are NCHW, "valid" padding.

/// Geometry of a square-kernel convolution over an `h × w` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.kernel) / self.stride + 1
    }

    /// Rows of the column matrix: one per (channel, ki, kj).
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix: one per (sample, oh, ow).
    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `a` is `m×k` after the
/// optional transpose, `b` is `k×n`, and every matrix is row-major in
/// its stored (untransposed) layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides, and `c` does not alias `a` or `b`.
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

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    let plane = g.h * g.w;
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(n * g.channels + c) * plane..][..plane];
                    let base = n * oh * ow;
                    for i in 0..oh {
                        let y = i * g.stride + ki;
                        let src_row = &src[y * g.w..(y + 1) * g.w];
                        let d = &mut dst[base + i * ow..base + (i + 1) * ow];
                        for (j, v) in d.iter_mut().enumerate() {
                            *v = src_row[j * g.stride + kj];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column matrix back into an NCHW image buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.col_cols();
    let plane = g.h * g.w;
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut x[(n * g.channels + c) * plane..][..plane];
                    let base = n * oh * ow;
                    for i in 0..oh {
                        let y = i * g.stride + ki;
                        let s = &src[base + i * ow..base + (i + 1) * ow];
                        for (j, v) in s.iter().enumerate() {
                            dst[y * g.w + j * g.stride + kj] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `[N, C, P]` → `[C, N·P]`.
pub(crate) fn nchw_to_cn(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..][..p].copy_from_slice(&x[(b * c + ch) * p..][..p]);
        }
    }
    out
}

/// `[C, N·P]` → `[N, C, P]`.
pub(crate) fn cn_to_nchw(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..][..p].copy_from_slice(&x[ch * n * p + b * p..][..p]);
        }
    }
    out
}
