use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Backward through ReLU given the forward output; the kink at 0 passes no gradient.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gi, &y) in g.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *gi = T::zero();
        }
    }
    g
}
