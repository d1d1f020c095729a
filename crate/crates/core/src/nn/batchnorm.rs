//! Per-channel batch normalization for `(B, C, H, W)` activations.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    mode: Mode,
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn layout<T: Scalar>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if c != p.channels() {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm has {} channels, input has {c}",
            p.channels()
        )));
    }
    Ok((b, c, h * w))
}

/// Normalizes `x`. In train mode batch statistics are used and the running
/// statistics in `p` are updated.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (b, c, plane) = layout(x, p)?;
    if mode == Mode::Train && b < 2 {
        return Err(Error::BatchTooSmall { got: b, need: 2 });
    }
    let eps = T::of(BN_EPS);
    let n = b * plane;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    match mode {
        Mode::Train => {
            let nf = T::of_usize(n);
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    let off = (bi * c + ch) * plane;
                    s += x.data()[off..off + plane].iter().copied().sum::<T>();
                }
                let m = s / nf;
                let mut v = T::zero();
                for bi in 0..b {
                    let off = (bi * c + ch) * plane;
                    v += x.data()[off..off + plane]
                        .iter()
                        .map(|&e| (e - m) * (e - m))
                        .sum::<T>();
                }
                mean[ch] = m;
                var[ch] = v / nf;
            }
            let mom = T::of(BN_MOMENTUM);
            let unbias = nf / T::of_usize(n - 1);
            for ch in 0..c {
                let rm = &mut p.running_mean.data_mut()[ch];
                *rm = mom * *rm + (T::one() - mom) * mean[ch];
                let rv = &mut p.running_var.data_mut()[ch];
                *rv = mom * *rv + (T::one() - mom) * var[ch] * unbias;
            }
        }
        Mode::Eval => {
            mean.copy_from_slice(p.running_mean.data());
            var.copy_from_slice(p.running_var.data());
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let (g, bt) = (p.gamma.data()[ch], p.beta.data()[ch]);
            for i in off..off + plane {
                let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                x_hat.data_mut()[i] = xh;
                y.data_mut()[i] = g * xh + bt;
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            mode,
            x_hat,
            inv_std,
        },
    ))
}

/// Eval-mode normalization with running statistics, without a cache.
pub fn batchnorm_infer<T: Scalar>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let (b, c, plane) = layout(x, p)?;
    let eps = T::of(BN_EPS);
    let mut y = Tensor::zeros(x.shape());
    for ch in 0..c {
        let inv_std = T::one() / (p.running_var.data()[ch] + eps).sqrt();
        let scale = p.gamma.data()[ch] * inv_std;
        let shift = p.beta.data()[ch] - p.running_mean.data()[ch] * scale;
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                y.data_mut()[i] = x.data()[i] * scale + shift;
            }
        }
    }
    Ok(y)
}

pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    p: &BatchNormParams<T>,
) -> Result<BatchNormGrads<T>> {
    grad_out.check_same_shape(&cache.x_hat)?;
    let (b, c, plane) = layout(grad_out, p)?;
    let nf = T::of_usize(b * plane);
    let mut gx = Tensor::zeros(grad_out.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                let dy = grad_out.data()[i];
                sum_dy += dy;
                sum_dy_xh += dy * cache.x_hat.data()[i];
            }
        }
        gg.data_mut()[ch] = sum_dy_xh;
        gbeta.data_mut()[ch] = sum_dy;
        let scale = p.gamma.data()[ch] * cache.inv_std[ch];
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                let dy = grad_out.data()[i];
                gx.data_mut()[i] = match cache.mode {
                    Mode::Train => {
                        scale * (dy - sum_dy / nf - cache.x_hat.data()[i] * sum_dy_xh / nf)
                    }
                    Mode::Eval => scale * dy,
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: gx,
        gamma: gg,
        beta: gbeta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f64> {
        Tensor::from_vec(
            &[3, 2, 2, 2],
            (0..24)
                .map(|i| ((i * 7919) % 23) as f64 * 1.37 - 2.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn train_mode_standardizes() {
        let mut p = BatchNormParams::<f64>::new(2);
        let (y, _) = batchnorm_forward(&sample(), &mut p, Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.data()[(b * 2 + ch) * 4..(b * 2 + ch) * 4 + 4].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 12.0;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 12.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-6, "variance {v}");
        }
        assert!(p.running_var.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn eval_mode_plug_in() {
        let mut p = BatchNormParams::<f64>::new(2);
        let x = sample();
        let (y, _) = batchnorm_forward(&x, &mut p, Mode::Eval).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / (1.0 + BN_EPS).sqrt()).abs() < 1e-14 * b.abs().max(1.0));
        }
        assert_eq!(p, BatchNormParams::new(2));
    }

    #[test]
    fn batch_of_one_rejected_in_train() {
        let mut p = BatchNormParams::<f64>::new(1);
        assert!(matches!(
            batchnorm_forward(&Tensor::zeros(&[1, 1, 2, 2]), &mut p, Mode::Train),
            Err(Error::BatchTooSmall { .. })
        ));
        assert!(batchnorm_forward(&Tensor::zeros(&[1, 1, 2, 2]), &mut p, Mode::Eval).is_ok());
    }
}
