//! Valid (unpadded) strided 2-d cross-correlation via im2col.

use crate::error::{Error, Result};
use crate::nn::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `(out_ch, in_ch, kh, kw)`
    pub weight: Tensor<T>,
    /// `(out_ch,)`
    pub bias: Tensor<T>,
    pub stride: (usize, usize),
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(
        out_ch: usize,
        in_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Self {
        Self {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel.0, kernel.1]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
        }
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        self.weight.dims4().expect("conv weight is 4-d")
    }
}

/// Output spatial size of a valid convolution, or `None` if the kernel does not fit.
pub fn conv_output_size(
    input: (usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Option<(usize, usize)> {
    if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return None;
    }
    if input.0 < kernel.0 || input.1 < kernel.1 {
        return None;
    }
    Some((
        (input.0 - kernel.0) / stride.0 + 1,
        (input.1 - kernel.1) / stride.1 + 1,
    ))
}

/// Saved state for [`conv_backward`].
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    input_shape: [usize; 4],
    out_hw: (usize, usize),
    /// One `(in_ch·kh·kw, out_h·out_w)` patch matrix per batch item.
    cols: Vec<Vec<T>>,
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let p = oh * ow;
    let mut col = vec![T::zero(); c * kh * kw * p];
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = &x[(ci * h + oy * sh + i) * w + j..];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, slot) in out.iter_mut().enumerate() {
                        *slot = src[ox * sw];
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(
    col: &[T],
    dx: &mut [T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (oh, ow): (usize, usize),
) {
    let p = oh * ow;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let base = (ci * h + oy * sh + i) * w + j;
                    for ox in 0..ow {
                        dx[base + ox * sw] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn check_input<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
) -> Result<((usize, usize, usize, usize), (usize, usize))> {
    let (b, c, h, w) = x.dims4()?;
    let (oc, ic, kh, kw) = p.dims();
    if c != ic {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {ic} input channels, got {c}"
        )));
    }
    if p.bias.shape() != [oc] {
        return Err(Error::ShapeMismatch(format!(
            "conv bias {:?} for {oc} filters",
            p.bias.shape()
        )));
    }
    let out = conv_output_size((h, w), (kh, kw), p.stride).ok_or_else(|| {
        Error::ShapeMismatch(format!(
            "{kh}x{kw} kernel with stride {:?} does not fit {h}x{w} input",
            p.stride
        ))
    })?;
    Ok(((b, c, h, w), out))
}

/// Forward pass without keeping a cache.
pub fn conv_infer<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv_impl(x, p, false).map(|(y, _)| y)
}

/// Forward pass returning the cache needed by [`conv_backward`].
pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    conv_impl(x, p, true)
}

fn conv_impl<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    keep: bool,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let ((b, c, h, w), (oh, ow)) = check_input(x, p)?;
    let (oc, _, kh, kw) = p.dims();
    let ck = c * kh * kw;
    let plane = oh * ow;
    let mut y = Tensor::zeros(&[b, oc, oh, ow]);
    let mut cols = Vec::with_capacity(if keep { b } else { 0 });
    let in_item = c * h * w;
    for bi in 0..b {
        let col = im2col(
            &x.data()[bi * in_item..(bi + 1) * in_item],
            (c, h, w),
            (kh, kw),
            p.stride,
            (oh, ow),
        );
        let out = &mut y.data_mut()[bi * oc * plane..(bi + 1) * oc * plane];
        for (o, &bias) in p.bias.data().iter().enumerate() {
            out[o * plane..(o + 1) * plane].fill(bias);
        }
        gemm_nn(oc, ck, plane, p.weight.data(), &col, out);
        if keep {
            cols.push(col);
        }
    }
    Ok((
        y,
        ConvCache {
            input_shape: [b, c, h, w],
            out_hw: (oh, ow),
            cols,
        },
    ))
}

/// Exact gradients of the forward map with respect to input, weights and bias.
pub fn conv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &ConvCache<T>,
    p: &ConvParams<T>,
) -> Result<ConvGrads<T>> {
    let [b, c, h, w] = cache.input_shape;
    let (oc, ic, kh, kw) = p.dims();
    let (oh, ow) = cache.out_hw;
    if grad_out.shape() != [b, oc, oh, ow] || ic != c {
        return Err(Error::ShapeMismatch(format!(
            "conv grad {:?} does not match cached output {:?}",
            grad_out.shape(),
            [b, oc, oh, ow]
        )));
    }
    if cache.cols.len() != b {
        return Err(Error::MissingCache);
    }
    let ck = c * kh * kw;
    let plane = oh * ow;
    let mut gw = Tensor::zeros(p.weight.shape());
    let mut gb = Tensor::zeros(&[oc]);
    let mut gx = Tensor::zeros(&cache.input_shape);
    let mut dcol = vec![T::zero(); ck * plane];
    let in_item = c * h * w;
    for bi in 0..b {
        let g = &grad_out.data()[bi * oc * plane..(bi + 1) * oc * plane];
        for (o, slot) in gb.data_mut().iter_mut().enumerate() {
            *slot += g[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
        gemm_nt(oc, plane, ck, g, &cache.cols[bi], gw.data_mut());
        dcol.fill(T::zero());
        gemm_tn(ck, oc, plane, p.weight.data(), g, &mut dcol);
        col2im(
            &dcol,
            &mut gx.data_mut()[bi * in_item..(bi + 1) * in_item],
            (c, h, w),
            (kh, kw),
            p.stride,
            (oh, ow),
        );
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}
