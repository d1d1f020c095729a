//! Softmax cross-entropy for the classification phase and the pairwise
//! contrastive loss for the Siamese phase.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean cross-entropy over the batch and its gradient `(softmax - onehot) / B`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, s) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: s,
        });
    }
    let bf = T::of_usize(b);
    let mut grad = Tensor::zeros(&[b, s]);
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum_exp: T = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        total += lse - row[label];
        let g = &mut grad.data_mut()[i * s..(i + 1) * s];
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - lse).exp() / bf;
        }
        g[label] -= T::one() / bf;
    }
    Ok((total / bf, grad))
}

/// Row-wise Euclidean distance `‖e1 - e2‖₂`.
pub fn embedding_distance<T: Scalar>(e1: &Tensor<T>, e2: &Tensor<T>) -> Result<Vec<T>> {
    e1.check_same_shape(e2)?;
    let (b, _) = e1.dims2()?;
    Ok((0..b)
        .map(|i| {
            e1.row(i)
                .iter()
                .zip(e2.row(i))
                .map(|(&a, &c)| (a - c) * (a - c))
                .sum::<T>()
                .sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    /// Impostor margin `M`.
    pub margin: f64,
    /// Weight of the squared-norm penalty on conv/fc weights.
    pub lambda: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            lambda: 1e-4,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "margin and lambda must be non-negative, got {} and {}",
                self.margin, self.lambda
            )));
        }
        Ok(())
    }
}

/// Contrastive term for a single pair: `½D²` for genuine (`y = 1`),
/// `½ max(0, M - D)²` for impostor (`y = 0`).
pub fn pair_term<T: Scalar>(distance: T, genuine: bool, margin: T) -> T {
    let half = T::of(0.5);
    if genuine {
        half * distance * distance
    } else {
        let h = (margin - distance).max(T::zero());
        half * h * h
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput<T> {
    /// Mean pair term over the `N` pairs (no weight penalty).
    pub loss: T,
    pub distances: Vec<T>,
    pub pair_terms: Vec<T>,
    pub grad_e1: Tensor<T>,
    pub grad_e2: Tensor<T>,
}

/// Mean contrastive loss over pairs `(e1[i], e2[i])` with labels `y[i] ∈ {0, 1}`.
///
/// The impostor subgradient is taken as zero at `D = 0` and at the hinge `D = M`.
pub fn contrastive_loss<T: Scalar>(
    e1: &Tensor<T>,
    e2: &Tensor<T>,
    labels: &[u8],
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveOutput<T>> {
    let distances = embedding_distance(e1, e2)?;
    let (n, d) = e1.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} pairs",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidLabel(bad));
    }
    let margin = T::of(cfg.margin);
    let nf = T::of_usize(n.max(1));
    let mut grad_e1 = Tensor::zeros(&[n, d]);
    let mut grad_e2 = Tensor::zeros(&[n, d]);
    let mut pair_terms = Vec::with_capacity(n);
    for i in 0..n {
        let dist = distances[i];
        let genuine = labels[i] == 1;
        pair_terms.push(pair_term(dist, genuine, margin));
        // d(term)/d(e1) = coef * (e1 - e2)
        let coef = if genuine {
            T::one()
        } else if dist > T::zero() && dist < margin {
            -(margin - dist) / dist
        } else {
            T::zero()
        } / nf;
        if coef == T::zero() {
            continue;
        }
        for j in 0..d {
            let diff = e1.row(i)[j] - e2.row(i)[j];
            grad_e1.data_mut()[i * d + j] = coef * diff;
            grad_e2.data_mut()[i * d + j] = -coef * diff;
        }
    }
    let loss = if n == 0 {
        T::zero()
    } else {
        pair_terms.iter().copied().sum::<T>() / nf
    };
    Ok(ContrastiveOutput {
        loss,
        distances,
        pair_terms,
        grad_e1,
        grad_e2,
    })
}
