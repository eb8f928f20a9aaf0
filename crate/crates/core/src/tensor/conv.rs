//! im2col lowering for 2-d convolution.

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.hout * self.wout
    }

    /// 1x1, stride 1, no padding: the image itself is the patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` lies
    /// inside the image, for stride 1.
    fn unit_stride_span(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wout);
        (lo, hi.max(lo))
    }
}

/// Writes the `[cin*k*k, hout*wout]` patch matrix of one image into `col`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.col_cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wout..(oy + 1) * g.wout];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.unit_stride_span(kx);
                        out_row[..lo].fill(0.0);
                        out_row[hi..].fill(0.0);
                        let off = lo + kx - g.pad;
                        out_row[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        continue;
                    }
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
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

/// Scatter-adds a patch-matrix gradient back onto one image gradient.
pub(crate) fn col2im_add(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let row = &src[oy * g.wout..(oy + 1) * g.wout];
                    if g.stride == 1 {
                        let (lo, hi) = g.unit_stride_span(kx);
                        let off = lo + kx - g.pad;
                        for (d, s) in dst[off..off + hi - lo].iter_mut().zip(&row[lo..hi]) {
                            *d += s;
                        }
                        continue;
                    }
                    for ox in 0..g.wout {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wout + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`
/// when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
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
    // SAFETY: buffer sizes are checked above and the strides describe
    // in-bounds row-major (or transposed) views of them.
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_with_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // a^T stored as 3x2, b^T stored as 2x3
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [1.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, 1.0, &mut c2);
        assert_eq!(c2, [59.0, 65.0, 140.0, 155.0]);
    }

    fn geometries() -> Vec<ConvGeom> {
        let mut out = Vec::new();
        for (k, pad) in [(1, 0), (3, 1), (3, 0), (5, 2), (5, 1)] {
            for stride in [1, 2] {
                let (h, w) = (5, 4);
                if k > w + 2 * pad {
                    continue;
                }
                out.push(ConvGeom {
                    cin: 2,
                    h,
                    w,
                    k,
                    stride,
                    pad,
                    hout: (h + 2 * pad - k) / stride + 1,
                    wout: (w + 2 * pad - k) / stride + 1,
                });
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for g in geometries() {
            let x: Vec<f64> = (0..g.cin * g.h * g.w).map(|i| i as f64 + 1.0).collect();
            let mut col = vec![f64::NAN; g.col_rows() * g.col_cols()];
            im2col(&x, &g, &mut col);
            for ci in 0..g.cin {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        for oy in 0..g.hout {
                            for ox in 0..g.wout {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                let inside =
                                    iy >= 0 && ix >= 0 && iy < g.h as isize && ix < g.w as isize;
                                let want = if inside {
                                    x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                } else {
                                    0.0
                                };
                                let row = (ci * g.k + ky) * g.k + kx;
                                assert_eq!(
                                    col[row * g.col_cols() + oy * g.wout + ox],
                                    want,
                                    "{g:?}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        for g in geometries() {
            let x: Vec<f64> = (0..g.cin * g.h * g.w)
                .map(|i| (i as f64 * 0.37).sin())
                .collect();
            let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
                .map(|i| (i as f64 * 0.11).cos())
                .collect();
            let mut col = vec![0.0; y.len()];
            im2col(&x, &g, &mut col);
            let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut dx = vec![0.0; x.len()];
            col2im_add(&y, &g, &mut dx);
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{g:?}");
        }
    }
}
