//! Forward and backward kernels on single-sample CHW tensors.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Floating-point element type of the network (`f32` fast path, `f64`
/// for verification).
pub trait Scalar:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn is_finite(self) -> bool;

    /// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Strides and dimensions must describe in-bounds views of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major `C[m x n] (+)= A[m x k] * B[k x n]`, with either operand
/// optionally transposed in memory.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: the asserts above pin every view inside its slice.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
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

/// A single-sample activation tensor, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::ZERO; channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }
}

/// Unfolds 3x3 neighbourhoods (zero padding 1) into a
/// `[channels * 9] x [height * width]` matrix.
pub fn im2col3<T: Scalar>(x: &Tensor<T>, col: &mut Vec<T>) {
    let (h, w) = (x.height, x.width);
    let plane = h * w;
    col.clear();
    col.resize(x.channels * 9 * plane, T::ZERO);
    for c in 0..x.channels {
        let src = x.channel(c);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * plane;
                let dst = &mut col[row..row + plane];
                // output pixel (y, x) reads input (y + ky - 1, x + kx - 1)
                let y0 = usize::from(ky == 0);
                let y1 = if ky == 2 { h - 1 } else { h };
                let x0 = usize::from(kx == 0);
                let x1 = if kx == 2 { w - 1 } else { w };
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let s = sy * w + x0 + kx - 1;
                    let d = y * w + x0;
                    dst[d..d + (x1 - x0)].copy_from_slice(&src[s..s + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatters column gradients back onto the input.
pub fn col2im3<T: Scalar>(col: &[T], channels: usize, h: usize, w: usize) -> Tensor<T> {
    let plane = h * w;
    let mut out = Tensor::zeros(channels, h, w);
    for c in 0..channels {
        let dst = &mut out.data[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * plane;
                let src = &col[row..row + plane];
                let y0 = usize::from(ky == 0);
                let y1 = if ky == 2 { h - 1 } else { h };
                let x0 = usize::from(kx == 0);
                let x1 = if kx == 2 { w - 1 } else { w };
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let d = sy * w + x0 + kx - 1;
                    let s = y * w + x0;
                    for (o, &v) in dst[d..d + (x1 - x0)].iter_mut().zip(&src[s..s + (x1 - x0)]) {
                        *o += v;
                    }
                }
            }
        }
    }
    out
}

/// Convolution forward. `kernel` is 1 or 3; weights are
/// `[out_channels] x [in_channels * kernel^2]`. Returns the output and the
/// column matrix needed by the backward pass.
pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    kernel: usize,
) -> (Tensor<T>, Vec<T>) {
    let plane = x.plane();
    let inner = x.channels * kernel * kernel;
    let mut col = Vec::new();
    if kernel == 3 {
        im2col3(x, &mut col);
    } else {
        col.extend_from_slice(&x.data);
    }
    let mut out = Tensor::zeros(out_channels, x.height, x.width);
    matmul(out_channels, inner, plane, weight, false, &col, false, &mut out.data, false);
    if let Some(b) = bias {
        for (c, &bc) in b.iter().enumerate() {
            for v in &mut out.data[c * plane..(c + 1) * plane] {
                *v += bc;
            }
        }
    }
    (out, col)
}

/// Convolution backward: writes weight (and bias) gradients, returns the
/// input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    col: &[T],
    weight: &[T],
    in_channels: usize,
    kernel: usize,
    grad_weight: &mut [T],
    grad_bias: Option<&mut [T]>,
) -> Tensor<T> {
    let plane = grad_out.plane();
    let out_channels = grad_out.channels;
    let inner = in_channels * kernel * kernel;
    matmul(out_channels, plane, inner, &grad_out.data, false, col, true, grad_weight, true);
    if let Some(gb) = grad_bias {
        for (c, g) in gb.iter_mut().enumerate() {
            for &v in grad_out.channel(c) {
                *g += v;
            }
        }
    }
    let mut grad_col = vec![T::ZERO; inner * plane];
    matmul(inner, out_channels, plane, weight, true, &grad_out.data, false, &mut grad_col, false);
    if kernel == 3 {
        col2im3(&grad_col, in_channels, grad_out.height, grad_out.width)
    } else {
        Tensor {
            channels: in_channels,
            height: grad_out.height,
            width: grad_out.width,
            data: grad_col,
        }
    }
}

/// Instance normalization without affine parameters. Returns the
/// normalized tensor and the per-channel inverse standard deviations.
pub fn instance_norm_forward<T: Scalar>(x: &Tensor<T>, eps: f64) -> (Tensor<T>, Vec<T>) {
    let plane = x.plane();
    let n = T::from_f64(plane as f64);
    let mut out = Tensor::zeros(x.channels, x.height, x.width);
    let mut inv_std = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let src = x.channel(c);
        let mut mean = T::ZERO;
        for &v in src {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::ZERO;
        for &v in src {
            let d = v - mean;
            var += d * d;
        }
        var = var / n;
        let inv = T::ONE / (var + T::from_f64(eps)).sqrt();
        for (o, &v) in out.data[c * plane..(c + 1) * plane].iter_mut().zip(src) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

/// Backward of [`instance_norm_forward`] given its output `normalized`.
pub fn instance_norm_backward<T: Scalar>(grad_out: &Tensor<T>, normalized: &Tensor<T>, inv_std: &[T]) -> Tensor<T> {
    let plane = grad_out.plane();
    let n = T::from_f64(plane as f64);
    let mut out = Tensor::zeros(grad_out.channels, grad_out.height, grad_out.width);
    for (c, &inv) in inv_std.iter().enumerate() {
        let g = grad_out.channel(c);
        let xh = normalized.channel(c);
        let mut sum_g = T::ZERO;
        let mut sum_gx = T::ZERO;
        for (&gv, &xv) in g.iter().zip(xh) {
            sum_g += gv;
            sum_gx += gv * xv;
        }
        let mean_g = sum_g / n;
        let mean_gx = sum_gx / n;
        for ((o, &gv), &xv) in out.data[c * plane..(c + 1) * plane].iter_mut().zip(g).zip(xh) {
            *o = inv * (gv - mean_g - xv * mean_gx);
        }
    }
    out
}

pub fn relu_forward<T: Scalar>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if !(*v > T::ZERO) {
            *v = T::ZERO;
        }
    }
}

/// `output` is the ReLU output of the forward pass.
pub fn relu_backward<T: Scalar>(grad: &mut Tensor<T>, output: &Tensor<T>) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if !(y > T::ZERO) {
            *g = T::ZERO;
        }
    }
}

/// 2x2 max pooling with stride 2; returns the flat argmax of each window.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = Tensor::zeros(x.channels, h, w);
    let mut arg = Vec::with_capacity(x.channels * h * w);
    for c in 0..x.channels {
        let base = c * x.plane();
        for y in 0..h {
            for xx in 0..w {
                let i0 = base + 2 * y * x.width + 2 * xx;
                let mut best = i0;
                for i in [i0 + 1, i0 + x.width, i0 + x.width + 1] {
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                out.data[c * h * w + y * w + xx] = x.data[best];
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(grad: &Tensor<T>, arg: &[u32], channels: usize, h: usize, w: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(channels, h, w);
    for (&g, &i) in grad.data.iter().zip(arg) {
        out.data[i as usize] += g;
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Tensor::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.width + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(grad: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (grad.height / 2, grad.width / 2);
    let mut out = Tensor::zeros(grad.channels, h, w);
    for c in 0..grad.channels {
        let src = grad.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..grad.height {
            for xx in 0..grad.width {
                dst[(y / 2) * w + xx / 2] += src[y * grad.width + xx];
            }
        }
    }
    out
}

pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

/// Splits a gradient at channel `first`.
pub fn split<T: Scalar>(x: Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let at = first * x.plane();
    let mut data = x.data;
    let rest = data.split_off(at);
    (
        Tensor {
            channels: first,
            height: x.height,
            width: x.width,
            data,
        },
        Tensor {
            channels: x.channels - first,
            height: x.height,
            width: x.width,
            data: rest,
        },
    )
}

pub fn sigmoid_forward<T: Scalar>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        *v = T::ONE / (T::ONE + (-*v).exp());
    }
}

pub fn sigmoid_backward<T: Scalar>(grad: &mut Tensor<T>, output: &Tensor<T>) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        *g = *g * y * (T::ONE - y);
    }
}
