//! Dense kernels shared by the forward and backward passes.

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` logically
/// `[m, k]` and `b` logically `[k, n]`. A transposed operand is stored in
/// the opposite layout (`[k, m]` for `a`, `[n, k]` for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the `m*k`, `k*n` and `m*n`
    // element buffers whose lengths are asserted on entry.
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

/// Geometry of a square-kernel sliding window over one `[C, H, W]` image.
#[derive(Debug, Clone, Copy)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds an image into a `[C*k*k, Ho*Wo]` patch matrix (zero padding).
pub fn im2col(img: &[f64], win: &Window, col: &mut [f64]) {
    let (ho, wo) = (win.out_height(), win.out_width());
    let k = win.kernel;
    debug_assert_eq!(col.len(), win.col_rows() * ho * wo);
    for c in 0..win.channels {
        let plane = &img[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= win.height as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * win.width..(iy as usize + 1) * win.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                        *d = if ix < 0 || ix >= win.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back, accumulating into `img`.
pub fn col2im(col: &[f64], win: &Window, img: &mut [f64]) {
    let (ho, wo) = (win.out_height(), win.out_width());
    let k = win.kernel;
    for c in 0..win.channels {
        let plane = &mut img[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    if iy < 0 || iy >= win.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * win.width..(iy as usize + 1) * win.width];
                    for ox in 0..wo {
                        let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                        if ix >= 0 && ix < win.width as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
