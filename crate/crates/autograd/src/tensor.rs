//! Dense row-major `f64` tensors and the numeric kernels the graph ops call into.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "bad reshape to {shape:?}");
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, start + len)` along axis 0.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.shape[0], "row slice out of range");
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self { shape, data: self.data[start * row..(start + len) * row].to_vec() }
    }

    /// Gathers rows along axis 0 in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self { shape, data }
    }

    /// Concatenates tensors along axis 0.
    pub fn stack_rows(parts: &[Tensor]) -> Self {
        assert!(!parts.is_empty(), "stack_rows of nothing");
        let tail = &parts[0].shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            assert_eq!(&p.shape[1..], tail, "stack_rows shape mismatch");
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = n;
        Self { shape, data }
    }
}

/// Output spatial extent of a convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= kernel, "kernel {kernel} larger than padded input {len}+2*{pad}");
    (len + 2 * pad - kernel) / stride + 1
}

/// `c[m x n] (+)= a[m x k] * b[k x n]` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: the slices cover every index addressed by the given shapes and strides;
    // callers only pass contiguous row-major buffers and their transposes.
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

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.rank() == 2 && b.rank() == 2, "matmul needs matrices");
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dimension mismatch {:?} x {:?}", a.shape, b.shape);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1, &mut out, false);
    Tensor::new([m, n], out)
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2, "transpose needs a matrix");
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new([n, m], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, geo: ConvGeometry, ho: usize, wo: usize, cols: &mut [f64]) {
    let k = geo.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, geo: ConvGeometry, ho: usize, wo: usize, x: &mut [f64]) {
    let k = geo.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x [N, Ci, H, W]` with `w [Co, Ci, k, k]`.
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Tensor {
    assert_eq!(x.rank(), 4, "conv2d input must be NCHW, got {:?}", x.shape);
    assert_eq!(w.rank(), 4, "conv2d weight must be rank 4");
    let (n, ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let co = w.shape[0];
    assert_eq!(w.shape[1], ci, "conv2d channel mismatch: input {:?}, weight {:?}", x.shape, w.shape);
    assert_eq!(w.shape[2], geo.kernel);
    let (ho, wo) = (conv_out_len(h, geo.kernel, geo.stride, geo.pad), conv_out_len(wd, geo.kernel, geo.stride, geo.pad));
    let rows = ci * geo.kernel * geo.kernel;
    let plane = ho * wo;
    let mut out = vec![0.0; n * co * plane];
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
    for s in 0..n {
        let xs = &x.data[s * ci * h * wd..(s + 1) * ci * h * wd];
        let b: &[f64] = if geo.is_pointwise() {
            xs
        } else {
            im2col(xs, ci, h, wd, geo, ho, wo, &mut cols);
            &cols
        };
        gemm(co, rows, plane, &w.data, rows as isize, 1, b, plane as isize, 1, &mut out[s * co * plane..(s + 1) * co * plane], false);
    }
    Tensor::new([n, co, ho, wo], out)
}

/// Adjoint of [`conv2d`] with respect to its input (a transposed convolution).
pub(crate) fn conv2d_input_grad(g: &Tensor, w: &Tensor, in_hw: (usize, usize), geo: ConvGeometry) -> Tensor {
    let (n, co, ho, wo) = (g.shape[0], g.shape[1], g.shape[2], g.shape[3]);
    assert_eq!(w.shape[0], co, "conv2d_input_grad channel mismatch");
    let ci = w.shape[1];
    let (h, wd) = in_hw;
    assert_eq!(ho, conv_out_len(h, geo.kernel, geo.stride, geo.pad));
    assert_eq!(wo, conv_out_len(wd, geo.kernel, geo.stride, geo.pad));
    let rows = ci * geo.kernel * geo.kernel;
    let plane = ho * wo;
    let mut out = vec![0.0; n * ci * h * wd];
    let mut cols = vec![0.0; rows * plane];
    for s in 0..n {
        let gs = &g.data[s * co * plane..(s + 1) * co * plane];
        let dst = &mut out[s * ci * h * wd..(s + 1) * ci * h * wd];
        if geo.is_pointwise() {
            gemm(rows, co, plane, &w.data, 1, rows as isize, gs, plane as isize, 1, dst, false);
        } else {
            gemm(rows, co, plane, &w.data, 1, rows as isize, gs, plane as isize, 1, &mut cols, false);
            col2im(&cols, ci, h, wd, geo, ho, wo, dst);
        }
    }
    Tensor::new([n, ci, h, wd], out)
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub(crate) fn conv2d_weight_grad(x: &Tensor, g: &Tensor, geo: ConvGeometry) -> Tensor {
    let (n, ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (n2, co, ho, wo) = (g.shape[0], g.shape[1], g.shape[2], g.shape[3]);
    assert_eq!(n, n2, "conv2d_weight_grad batch mismatch");
    assert_eq!(ho, conv_out_len(h, geo.kernel, geo.stride, geo.pad));
    assert_eq!(wo, conv_out_len(wd, geo.kernel, geo.stride, geo.pad));
    let rows = ci * geo.kernel * geo.kernel;
    let plane = ho * wo;
    let mut out = vec![0.0; co * rows];
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
    for s in 0..n {
        let xs = &x.data[s * ci * h * wd..(s + 1) * ci * h * wd];
        let gs = &g.data[s * co * plane..(s + 1) * co * plane];
        let b: &[f64] = if geo.is_pointwise() {
            xs
        } else {
            im2col(xs, ci, h, wd, geo, ho, wo, &mut cols);
            &cols
        };
        gemm(co, plane, rows, gs, plane as isize, 1, b, 1, plane as isize, &mut out, true);
    }
    Tensor::new([co, ci, geo.kernel, geo.kernel], out)
}

/// Nearest-neighbour x2 upsampling of the two trailing axes.
pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let r = x.rank();
    assert!(r >= 2, "upsample2 needs spatial axes");
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let planes = x.numel() / (h * w);
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let base = 2 * y * 2 * w + 2 * xx;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * w] = v;
                dst[base + 2 * w + 1] = v;
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[r - 2] = 2 * h;
    shape[r - 1] = 2 * w;
    Tensor::new(shape, out)
}

/// Sum over non-overlapping 2x2 blocks; the adjoint of [`upsample2`].
pub(crate) fn sum_pool2(x: &Tensor) -> Tensor {
    let r = x.rank();
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    assert!(h % 2 == 0 && w % 2 == 0, "sum_pool2 needs even spatial size");
    let (ho, wo) = (h / 2, w / 2);
    let planes = x.numel() / (h * w);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let base = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = src[base] + src[base + 1] + src[base + w] + src[base + w + 1];
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Tensor {
        let (n, ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let co = w.shape[0];
        let k = geo.kernel;
        let ho = conv_out_len(h, k, geo.stride, geo.pad);
        let wo = conv_out_len(wd, k, geo.stride, geo.pad);
        let mut out = Tensor::zeros([n, co, ho, wo]);
        for s in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                                    let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data[((s * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data[((o * ci + c) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out.data[((s * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 7919 % 23) as f64 - 11.0) * scale).collect())
    }

    #[test]
    fn conv_matches_direct_loops() {
        for geo in [
            ConvGeometry { kernel: 3, stride: 1, pad: 1 },
            ConvGeometry { kernel: 3, stride: 2, pad: 1 },
            ConvGeometry { kernel: 4, stride: 2, pad: 1 },
            ConvGeometry { kernel: 1, stride: 1, pad: 0 },
        ] {
            let x = ramp(&[2, 3, 6, 6], 0.1);
            let w = ramp(&[4, 3, geo.kernel, geo.kernel], 0.05);
            let fast = conv2d(&x, &w, geo);
            let slow = naive_conv(&x, &w, geo);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        let geo = ConvGeometry { kernel: 3, stride: 2, pad: 1 };
        let x = ramp(&[2, 3, 8, 8], 0.1);
        let w = ramp(&[5, 3, 3, 3], 0.03);
        let y = conv2d(&x, &w, geo);
        let g = ramp(y.shape(), 0.2);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gx = conv2d_input_grad(&g, &w, (8, 8), geo);
        let via_x: f64 = gx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let gw = conv2d_weight_grad(&x, &g, geo);
        let via_w: f64 = gw.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - via_w).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn upsample_and_pool_are_adjoint() {
        let x = ramp(&[1, 2, 3, 3], 1.0);
        let y = upsample2(&x);
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        let g = ramp(y.shape(), 0.5);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = sum_pool2(&g).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new([3, 1], vec![1.0, 0.0, -1.0]);
        assert_eq!(matmul(&a, &b).data(), &[-2.0, -2.0]);
        assert_eq!(transpose(&a).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
