//! Convolution kernels built on im2col + GEMM.

use crate::parallel;
use crate::tensor::Tensor;

/// Geometry of a strided, zero-padded square-kernel convolution over a
/// `c × h × w` input producing an `oh × ow` output grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let mut out = vec![0.0; g.rows() * ncols];
    let (h, w, k, s) = (g.h as isize, g.w as isize, g.k, g.stride as isize);
    let pad = g.pad as isize;
    parallel::for_each_chunk_mut(&mut out, ncols * k * k, |ci, block| {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut block[(ky * k + kx) * ncols..(ky * k + kx + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = oy as isize * s - pad + ky as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s - pad + kx as isize;
                        if ix >= 0 && ix < w {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `c × h × w` image.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncols = g.cols();
    let (h, w, k, s) = (g.h as isize, g.w as isize, g.k, g.stride as isize);
    let pad = g.pad as isize;
    parallel::for_each_chunk_mut(x, g.h * g.w, |ci, plane| {
        let block = &cols[ci * k * k * ncols..(ci + 1) * k * k * ncols];
        for ky in 0..k {
            for kx in 0..k {
                let row = &block[(ky * k + kx) * ncols..(ky * k + kx + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = oy as isize * s - pad + ky as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = ox as isize * s - pad + kx as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    });
}

/// `C = A·B + beta·C` with optional transposes; `C` is row-major `m × n`.
///
/// `a` is stored row-major as `m × k` (or `k × m` when `ta`), `b` as `k × n`
/// (or `n × k` when `tb`). Large products are split over row blocks of `C`;
/// each element's accumulation order is independent of the split.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let block_rows = if parallel::is_parallel() && m * n * k > 1 << 18 {
        m.div_ceil(8).max(1)
    } else {
        m
    };
    parallel::for_each_chunk_mut(c, block_rows * n, |bi, cblock| {
        let r0 = bi * block_rows;
        let rows = cblock.len() / n;
        // SAFETY: the A sub-block starts at row r0 and spans `rows` rows with
        // the strides above; B and the C block are in bounds by construction.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().offset(r0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                cblock.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// `y = conv(x, w) + b`, `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, k, _) = w.dims4();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let g = ConvGeom::new(cin, h, wd, k, stride, pad);
    let plane = g.oh * g.ow;
    let mut y = Tensor::zeros(&[n, cout, g.oh, g.ow]);
    for bi in 0..n {
        let cols = im2col(&x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd], &g);
        let yb = &mut y.data_mut()[bi * cout * plane..(bi + 1) * cout * plane];
        gemm(cout, g.rows(), plane, w.data(), false, &cols, false, 0.0, yb);
        if let Some(b) = b {
            add_channel_bias(yb, b.data(), plane);
        }
    }
    y
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let g = ConvGeom::new(cin, h, wd, k, stride, pad);
    let plane = g.oh * g.ow;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_dw.then(|| Tensor::zeros(&[cout]));
    for bi in 0..n {
        let dyb = &dy.data()[bi * cout * plane..(bi + 1) * cout * plane];
        if let Some(dx) = dx.as_mut() {
            let mut dcols = vec![0.0; g.rows() * plane];
            gemm(g.rows(), cout, plane, w.data(), true, dyb, false, 0.0, &mut dcols);
            col2im(
                &dcols,
                &g,
                &mut dx.data_mut()[bi * cin * h * wd..(bi + 1) * cin * h * wd],
            );
        }
        if let Some(dw) = dw.as_mut() {
            let cols = im2col(&x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd], &g);
            gemm(cout, plane, g.rows(), dyb, false, &cols, true, 1.0, dw.data_mut());
            accumulate_channel_sums(db.as_mut().unwrap().data_mut(), dyb, plane);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Output size of a transposed convolution along one axis.
pub fn conv_transpose_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size - 1) * stride + k - 2 * pad
}

/// Transposed convolution, `x: [N, Cin, H, W]`, `w: [Cin, Cout, k, k]`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (wcin, cout, k, _) = w.dims4();
    assert_eq!(cin, wcin, "conv_transpose2d channel mismatch");
    let oh = conv_transpose_out(h, k, stride, pad);
    let ow = conv_transpose_out(wd, k, stride, pad);
    let g = ConvGeom::new(cout, oh, ow, k, stride, pad);
    debug_assert_eq!((g.oh, g.ow), (h, wd));
    let in_plane = h * wd;
    let out_plane = oh * ow;
    let mut y = Tensor::zeros(&[n, cout, oh, ow]);
    for bi in 0..n {
        let xb = &x.data()[bi * cin * in_plane..(bi + 1) * cin * in_plane];
        let mut cols = vec![0.0; g.rows() * in_plane];
        gemm(g.rows(), cin, in_plane, w.data(), true, xb, false, 0.0, &mut cols);
        let yb = &mut y.data_mut()[bi * cout * out_plane..(bi + 1) * cout * out_plane];
        col2im(&cols, &g, yb);
        if let Some(b) = b {
            add_channel_bias(yb, b.data(), out_plane);
        }
    }
    y
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads {
    let (n, cin, h, wd) = x.dims4();
    let (_, cout, k, _) = w.dims4();
    let (_, _, oh, ow) = dy.dims4();
    let g = ConvGeom::new(cout, oh, ow, k, stride, pad);
    let in_plane = h * wd;
    let out_plane = oh * ow;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_dw.then(|| Tensor::zeros(&[cout]));
    for bi in 0..n {
        let dyb = &dy.data()[bi * cout * out_plane..(bi + 1) * cout * out_plane];
        let cols = im2col(dyb, &g);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[bi * cin * in_plane..(bi + 1) * cin * in_plane];
            gemm(cin, g.rows(), in_plane, w.data(), false, &cols, false, 0.0, dxb);
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x.data()[bi * cin * in_plane..(bi + 1) * cin * in_plane];
            gemm(cin, in_plane, g.rows(), xb, false, &cols, true, 1.0, dw.data_mut());
            accumulate_channel_sums(db.as_mut().unwrap().data_mut(), dyb, out_plane);
        }
    }
    ConvGrads { dx, dw, db }
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], plane: usize) {
    for (c, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[c];
        for v in chunk {
            *v += b;
        }
    }
}

fn accumulate_channel_sums(db: &mut [f64], dy: &[f64], plane: usize) {
    for (c, chunk) in dy.chunks(plane).enumerate() {
        db[c] += chunk.iter().sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, k, _) = w.dims4();
        let g = ConvGeom::new(cin, h, wd, k, stride, pad);
        let mut y = Tensor::zeros(&[n, cout, g.oh, g.ow]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        y.data_mut()[((b * cout + co) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp(shape: &[usize], seed: f64) -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..len).map(|i| (i as f64 * 0.37 + seed).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = ramp(&[2, 3, 7, 6], 0.1);
        let w = ramp(&[4, 3, 4, 4], 0.7);
        let y = conv2d(&x, &w, None, 2, 1);
        let r = naive_conv(&x, &w, 2, 1);
        assert!(y.max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with the same weights viewed as [Cin,Cout].
        let x = ramp(&[1, 3, 8, 8], 0.3);
        let w = ramp(&[5, 3, 4, 4], 1.1);
        let y = ramp(&[1, 5, 4, 4], 2.3);
        let cx = conv2d(&x, &w, None, 2, 1);
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        // conv weight [Cout=5, Cin=3] is the transposed-conv weight [Cin'=5, Cout'=3].
        let ty = conv_transpose2d(&y, &w, None, 2, 1);
        assert_eq!(ty.shape(), x.shape());
        let rhs: f64 = ty.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, true, 0.0, &mut c);
        // Aᵀ·Bᵀ = (B·A)ᵀ
        assert_eq!(c, [23.0, 31.0, 34.0, 46.0]);
    }
}
