//! Fully connected layer `y = x Wᵀ + b`.

use crate::error::{Error, Result};
use crate::nn::linalg::{axpy, dot};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FcParams<T> {
    /// `(out, in)`
    pub weight: Tensor<T>,
    /// `(out,)`
    pub bias: Tensor<T>,
}

impl<T: Scalar> FcParams<T> {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out, inp]),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub struct FcGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Accepts any input whose trailing dimensions flatten to the layer's input width.
pub fn fc_forward<T: Scalar>(x: &Tensor<T>, p: &FcParams<T>) -> Result<Tensor<T>> {
    let b = x.shape()[0];
    let (out, inp) = (p.out_dim(), p.in_dim());
    if x.len() != b * inp || p.bias.shape() != [out] {
        return Err(Error::ShapeMismatch(format!(
            "fc {inp}->{out} cannot take input {:?}",
            x.shape()
        )));
    }
    let mut y = Tensor::zeros(&[b, out]);
    for bi in 0..b {
        let xi = &x.data()[bi * inp..(bi + 1) * inp];
        for o in 0..out {
            y.data_mut()[bi * out + o] = dot(p.weight.row(o), xi) + p.bias.data()[o];
        }
    }
    Ok(y)
}

/// `x` is the forward input; the returned input gradient takes its shape.
pub fn fc_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    p: &FcParams<T>,
) -> Result<FcGrads<T>> {
    let b = x.shape()[0];
    let (out, inp) = (p.out_dim(), p.in_dim());
    if grad_out.shape() != [b, out] || x.len() != b * inp {
        return Err(Error::ShapeMismatch(format!(
            "fc grad {:?} for input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let mut gw = Tensor::zeros(&[out, inp]);
    let mut gb = Tensor::zeros(&[out]);
    let mut gx = Tensor::zeros(x.shape());
    for bi in 0..b {
        let xi = &x.data()[bi * inp..(bi + 1) * inp];
        let gi = grad_out.row(bi);
        for o in 0..out {
            let g = gi[o];
            if g == T::zero() {
                continue;
            }
            gb.data_mut()[o] += g;
            axpy(g, xi, &mut gw.data_mut()[o * inp..(o + 1) * inp]);
            axpy(
                g,
                p.weight.row(o),
                &mut gx.data_mut()[bi * inp..(bi + 1) * inp],
            );
        }
    }
    Ok(FcGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}
