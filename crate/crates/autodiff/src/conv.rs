//! Same-padded 2-D cross-correlation over `N×C×H×W` buffers, lowered to
//! matrix products through a column buffer.

use crate::linalg::{gemm, gemm_nt, gemm_tn};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Rows of the column buffer: one per `(c_in, tap_h, tap_w)`.
    fn taps(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Calls `f(col_index, input_index)` for every in-bounds pair of one
    /// batch element; padded positions are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let plane = self.plane();
        for ci in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * plane;
                    for h in 0..self.h {
                        let sh = h as isize + i as isize - ph;
                        if sh < 0 || sh >= self.h as isize {
                            continue;
                        }
                        for w in 0..self.w {
                            let sw = w as isize + j as isize - pw;
                            if sw < 0 || sw >= self.w as isize {
                                continue;
                            }
                            f(row + h * self.w + w, ci * plane + sh as usize * self.w + sw as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut col = vec![0.0; self.taps() * self.plane()];
        self.for_each_tap(|c, i| col[c] = x[i]);
        col
    }
}

pub(crate) fn forward(d: &ConvDims, x: &[f64], k: &[f64]) -> Vec<f64> {
    let (plane, taps) = (d.plane(), d.taps());
    let mut out = Vec::with_capacity(d.n * d.c_out * plane);
    for n in 0..d.n {
        let col = d.im2col(&x[n * d.c_in * plane..(n + 1) * d.c_in * plane]);
        out.extend(gemm(k, &col, d.c_out, taps, plane));
    }
    out
}

/// Returns `(grad_x, grad_k)` for upstream gradient `g`.
pub(crate) fn backward(d: &ConvDims, x: &[f64], k: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (plane, taps) = (d.plane(), d.taps());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for n in 0..d.n {
        let xs = n * d.c_in * plane;
        let gn = &g[n * d.c_out * plane..(n + 1) * d.c_out * plane];
        let col = d.im2col(&x[xs..xs + d.c_in * plane]);
        for (a, b) in gk.iter_mut().zip(gemm_nt(gn, &col, d.c_out, plane, taps)) {
            *a += b;
        }
        let gcol = gemm_tn(k, gn, d.c_out, taps, plane);
        let gxn = &mut gx[xs..xs + d.c_in * plane];
        d.for_each_tap(|c, i| gxn[i] += gcol[c]);
    }
    (gx, gk)
}
