//! Numeric kernels behind the tape: matrix products, convolution, pooling.

use crate::parallel;

/// Dense GEMM `c = alpha * op(a) * op(b) + beta * c` on row-major slices.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`
/// when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every element addressed by
    // the (m, k, n) extents and the strides chosen above.
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

/// Geometry of a square-kernel 2-D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// 1x1 stride-1 unpadded: the input image already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.out_ch * self.out_pixels() * self.col_rows()) as u64
    }
}

fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution; `x` is `[N, Ci, H, W]`, `w` is `[Co, Ci, k, k]`.
pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let p = g.out_pixels();
    let in_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * p;
    let rows = g.col_rows();
    let mut out = vec![0.0; g.batch * out_len];
    parallel::for_each_chunk_mut(&mut out, out_len, |n, dst| {
        let img = &x[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm(g.out_ch, rows, p, 1.0, w, false, img, false, 0.0, dst);
        } else {
            let mut cols = vec![0.0; rows * p];
            im2col(g, img, &mut cols);
            gemm(g.out_ch, rows, p, 1.0, w, false, &cols, false, 0.0, dst);
        }
    });
    out
}

/// Gradients of the convolution with respect to input (if requested) and weights.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let p = g.out_pixels();
    let in_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * p;
    let rows = g.col_rows();
    let wlen = g.out_ch * rows;

    // per-sample partials, summed below in sample order so the result does
    // not depend on scheduling
    let partials: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = parallel::map_indexed(g.batch, |n| {
        let img = &x[n * in_len..(n + 1) * in_len];
        let dy = &dout[n * out_len..(n + 1) * out_len];
        let cols_owned;
        let cols: &[f64] = if g.is_pointwise() {
            img
        } else {
            let mut c = vec![0.0; rows * p];
            im2col(g, img, &mut c);
            cols_owned = c;
            &cols_owned
        };
        let dw = need_dw.then(|| {
            let mut dw = vec![0.0; wlen];
            gemm(g.out_ch, p, rows, 1.0, dy, false, cols, true, 0.0, &mut dw);
            dw
        });
        let dx = need_dx.then(|| {
            let mut dcols = vec![0.0; rows * p];
            gemm(rows, g.out_ch, p, 1.0, w, true, dy, false, 0.0, &mut dcols);
            if g.is_pointwise() {
                dcols
            } else {
                let mut dimg = vec![0.0; in_len];
                col2im(g, &dcols, &mut dimg);
                dimg
            }
        });
        (dx, dw)
    });

    let mut dx = need_dx.then(|| Vec::with_capacity(g.batch * in_len));
    let mut dw = need_dw.then(|| vec![0.0; wlen]);
    for (px, pw) in partials {
        if let (Some(acc), Some(v)) = (dx.as_mut(), px) {
            acc.extend_from_slice(&v);
        }
        if let (Some(acc), Some(v)) = (dw.as_mut(), pw) {
            for (a, b) in acc.iter_mut().zip(&v) {
                *a += b;
            }
        }
    }
    (dx, dw)
}

/// Non-overlapping max pooling; returns values and the flat argmax per output.
pub(crate) fn max_pool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * k + ky) * w + ox * k + kx;
                        // first maximum wins on ties
                        if x[i] > best {
                            best = x[i];
                            bi = i;
                        }
                    }
                }
                out.push(best);
                arg.push(bi);
            }
        }
    }
    (out, arg)
}
