//! Diagonal-covariance GMM-UBM baseline: EM training with k-means++ seeding,
//! means-only MAP adaptation and average log-likelihood-ratio scoring.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &str = "SVGM1\n";
pub const VARIANCE_FLOOR: f64 = 1e-4;
pub const DEFAULT_COMPONENTS: usize = 64;
pub const DEFAULT_ITERS: usize = 20;
pub const DEFAULT_RELEVANCE: f64 = 16.0;
/// Components whose weight falls below this are reseeded.
pub const DEGENERATE_WEIGHT: f64 = 1e-8;
/// Frames per component used for k-means++ seeding.
const SEED_SUBSAMPLE_PER_COMPONENT: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm<T> {
    pub weights: Vec<T>,
    /// `(K, dim)`
    pub means: Tensor<T>,
    /// `(K, dim)`
    pub variances: Tensor<T>,
}

fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

impl<T: Scalar> DiagGmm<T> {
    pub fn new(weights: Vec<T>, means: Tensor<T>, variances: Tensor<T>) -> Result<Self> {
        let g = Self {
            weights,
            means,
            variances,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        let (mk, d) = self.means.dims2()?;
        let (vk, vd) = self.variances.dims2()?;
        if k == 0 || mk != k || vk != k || vd != d {
            return Err(Error::GmmFormat(format!(
                "inconsistent shapes: {k} weights, means {:?}, variances {:?}",
                self.means.shape(),
                self.variances.shape()
            )));
        }
        if self.weights.iter().any(|&w| !(w >= T::zero())) {
            return Err(Error::GmmFormat("negative or NaN weight".into()));
        }
        let sum: T = self.weights.iter().copied().sum();
        if (sum.to_f64_lossy() - 1.0).abs() > 1e-6 {
            return Err(Error::GmmFormat(format!("weights sum to {sum}")));
        }
        if !self.means.all_finite() || !self.variances.all_finite() {
            return Err(Error::GmmFormat("non-finite parameter".into()));
        }
        // f32 storage may round a floored variance just below the floor
        if self
            .variances
            .data()
            .iter()
            .any(|&v| v.to_f64_lossy() < VARIANCE_FLOOR * (1.0 - 1e-6))
        {
            return Err(Error::GmmFormat("variance below floor".into()));
        }
        Ok(())
    }

    /// Per-component `ln wₖ + ln N(x; μₖ, diag σₖ²)`.
    pub fn component_logliks(&self, frame: &[T], out: &mut [T]) {
        let half = T::of(0.5);
        let ln2pi = T::of((2.0 * std::f64::consts::PI).ln());
        for (k, o) in out.iter_mut().enumerate() {
            let mu = self.means.row(k);
            let var = self.variances.row(k);
            let mut acc = T::zero();
            for ((&x, &m), &v) in frame.iter().zip(mu).zip(var) {
                let diff = x - m;
                acc += ln2pi + v.ln() + diff * diff / v;
            }
            *o = self.weights[k].ln() - half * acc;
        }
    }
}

/// `ln Σₖ wₖ N(frame; μₖ, diag σₖ²)` via log-sum-exp.
pub fn gmm_loglik<T: Scalar>(gmm: &DiagGmm<T>, frame: &[T]) -> T {
    let mut buf = vec![T::zero(); gmm.n_components()];
    gmm.component_logliks(frame, &mut buf);
    log_sum_exp(&buf)
}

/// Responsibilities `γ (T, K)` and the total log-likelihood.
fn e_step<T: Scalar>(gmm: &DiagGmm<T>, frames: &Tensor<T>) -> (Tensor<T>, T) {
    let n = frames.shape()[0];
    let k = gmm.n_components();
    let mut gamma = Tensor::zeros(&[n, k]);
    let mut total = T::zero();
    for t in 0..n {
        let row = &mut gamma.data_mut()[t * k..(t + 1) * k];
        gmm.component_logliks(frames.row(t), row);
        let lse = log_sum_exp(row);
        total += lse;
        row.iter_mut().for_each(|g| *g = (*g - lse).exp());
    }
    (gamma, total)
}

/// Zeroth and first order statistics `(nₖ, Σ_t γₜₖ xₜ)`.
fn first_order_stats<T: Scalar>(gamma: &Tensor<T>, frames: &Tensor<T>) -> (Vec<T>, Tensor<T>) {
    let (n, k) = (gamma.shape()[0], gamma.shape()[1]);
    let d = frames.shape()[1];
    let mut nk = vec![T::zero(); k];
    let mut sx = Tensor::zeros(&[k, d]);
    for t in 0..n {
        let x = frames.row(t);
        for c in 0..k {
            let g = gamma.data()[t * k + c];
            nk[c] += g;
            let acc = &mut sx.data_mut()[c * d..(c + 1) * d];
            for (a, &xv) in acc.iter_mut().zip(x) {
                *a += g * xv;
            }
        }
    }
    (nk, sx)
}

fn check_frames<T: Scalar>(frames: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, d) = frames.dims2()?;
    if !frames.all_finite() {
        return Err(Error::Config("frames must be finite".into()));
    }
    Ok((n, d))
}

fn global_variance<T: Scalar>(frames: &Tensor<T>) -> Vec<T> {
    let (n, d) = (frames.shape()[0], frames.shape()[1]);
    let nf = T::of_usize(n);
    let floor = T::of(VARIANCE_FLOOR);
    (0..d)
        .map(|c| {
            let mean = (0..n).map(|t| frames.row(t)[c]).sum::<T>() / nf;
            let var = (0..n)
                .map(|t| {
                    let v = frames.row(t)[c] - mean;
                    v * v
                })
                .sum::<T>()
                / nf;
            var.max(floor)
        })
        .collect()
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means++ centers drawn from a frame subsample.
pub fn kmeans_pp<T: Scalar>(frames: &Tensor<T>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let n = frames.shape()[0];
    let m = n.min((SEED_SUBSAMPLE_PER_COMPONENT * k).max(1000));
    let mut idx = index::sample(rng, n, m).into_vec();
    idx.sort_unstable();
    let pool: Vec<&[T]> = idx.iter().map(|&i| frames.row(i)).collect();

    let mut centers: Vec<Vec<T>> = vec![pool[rng.random_range(0..m)].to_vec()];
    let mut d2: Vec<f64> = pool
        .iter()
        .map(|p| sq_dist(p, &centers[0]).to_f64_lossy())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        let c = pool[pick].to_vec();
        for (dv, p) in d2.iter_mut().zip(&pool) {
            *dv = dv.min(sq_dist(p, &c).to_f64_lossy());
        }
        centers.push(c);
    }
    centers
}

#[derive(Debug, Clone, PartialEq)]
pub struct UbmTraining<T> {
    pub gmm: DiagGmm<T>,
    /// Total log-likelihood of the frames under the model entering each
    /// iteration, then under the final model (`n_iters + 1` entries).
    pub ll_trace: Vec<f64>,
    /// `(iteration, component)` for every reseeded degenerate component.
    pub reseeded: Vec<(usize, usize)>,
}

/// EM training of a `K`-component diagonal GMM on `(T, dim)` frames.
pub fn train_ubm<T: Scalar>(
    frames: &Tensor<T>,
    k: usize,
    n_iters: usize,
    seed: u64,
) -> Result<UbmTraining<T>> {
    let (n, d) = check_frames(frames)?;
    if k == 0 {
        return Err(Error::Config("K must be positive".into()));
    }
    if n < 10 * k {
        return Err(Error::TooFewFrames {
            got: n,
            need: 10 * k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gvar = global_variance(frames);
    let centers = kmeans_pp(frames, k, &mut rng);
    let mut gmm = DiagGmm {
        weights: vec![T::one() / T::of_usize(k); k],
        means: Tensor::from_vec(&[k, d], centers.concat())?,
        variances: Tensor::from_vec(&[k, d], gvar.repeat(k))?,
    };

    let floor = T::of(VARIANCE_FLOOR);
    let nf = T::of_usize(n);
    let mut ll_trace = Vec::with_capacity(n_iters + 1);
    let mut reseeded = Vec::new();
    for iter in 0..n_iters {
        let (gamma, ll) = e_step(&gmm, frames);
        ll_trace.push(ll.to_f64_lossy());
        let (nk, sx) = first_order_stats(&gamma, frames);
        for c in 0..k {
            if (nk[c] / nf).to_f64_lossy() < DEGENERATE_WEIGHT {
                let t = rng.random_range(0..n);
                gmm.means.data_mut()[c * d..(c + 1) * d].copy_from_slice(frames.row(t));
                gmm.variances.data_mut()[c * d..(c + 1) * d].copy_from_slice(&gvar);
                gmm.weights[c] = T::one() / T::of_usize(k);
                reseeded.push((iter, c));
                continue;
            }
            gmm.weights[c] = nk[c] / nf;
            for j in 0..d {
                gmm.means.data_mut()[c * d + j] = sx.data()[c * d + j] / nk[c];
            }
            // second pass about the new mean
            let mu = gmm.means.row(c).to_vec();
            let mut acc = vec![T::zero(); d];
            for t in 0..n {
                let g = gamma.data()[t * k + c];
                for ((a, &x), &m) in acc.iter_mut().zip(frames.row(t)).zip(&mu) {
                    *a += g * (x - m) * (x - m);
                }
            }
            for j in 0..d {
                gmm.variances.data_mut()[c * d + j] = (acc[j] / nk[c]).max(floor);
            }
        }
        let total: T = gmm.weights.iter().copied().sum();
        gmm.weights.iter_mut().for_each(|w| *w /= total);
    }
    let (_, ll) = e_step(&gmm, frames);
    ll_trace.push(ll.to_f64_lossy());
    Ok(UbmTraining {
        gmm,
        ll_trace,
        reseeded,
    })
}

/// Means-only MAP adaptation with relevance factor `r`; weights and
/// variances are copied from the UBM.
pub fn map_adapt<T: Scalar>(
    ubm: &DiagGmm<T>,
    frames: &Tensor<T>,
    relevance: f64,
) -> Result<DiagGmm<T>> {
    let (n, d) = check_frames(frames)?;
    if n == 0 {
        return Err(Error::TooFewFrames { got: 0, need: 1 });
    }
    if d != ubm.dim() {
        return Err(Error::DimMismatch(ubm.dim(), d));
    }
    if !(relevance >= 0.0) {
        return Err(Error::Config(format!(
            "relevance must be >= 0, got {relevance}"
        )));
    }
    let (gamma, _) = e_step(ubm, frames);
    let (nk, sx) = first_order_stats(&gamma, frames);
    let mut out = ubm.clone();
    let r = T::of(relevance);
    for (c, &n_c) in nk.iter().enumerate() {
        if n_c <= T::zero() {
            continue;
        }
        let alpha = if relevance.is_infinite() {
            T::zero()
        } else {
            n_c / (n_c + r)
        };
        for j in 0..d {
            let e = sx.data()[c * d + j] / n_c;
            let m = &mut out.means.data_mut()[c * d + j];
            *m = alpha * e + (T::one() - alpha) * *m;
        }
    }
    Ok(out)
}

/// `(1/T) Σ_t [ln p(xₜ | speaker) − ln p(xₜ | ubm)]`.
pub fn llr_score<T: Scalar>(
    speaker: &DiagGmm<T>,
    ubm: &DiagGmm<T>,
    frames: &Tensor<T>,
) -> Result<T> {
    let (n, d) = check_frames(frames)?;
    if n == 0 {
        return Err(Error::TooFewFrames { got: 0, need: 1 });
    }
    if d != ubm.dim() || d != speaker.dim() {
        return Err(Error::DimMismatch(ubm.dim(), d));
    }
    let mut bs = vec![T::zero(); speaker.n_components()];
    let mut bu = vec![T::zero(); ubm.n_components()];
    let mut total = T::zero();
    for t in 0..n {
        speaker.component_logliks(frames.row(t), &mut bs);
        ubm.component_logliks(frames.row(t), &mut bu);
        total += log_sum_exp(&bs) - log_sum_exp(&bu);
    }
    Ok(total / T::of_usize(n))
}

impl<T: Scalar> DiagGmm<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut h = String::from(MAGIC);
        writeln!(h, "K {}", self.n_components()).unwrap();
        writeln!(h, "dim {}", self.dim()).unwrap();
        h.push_str("end\n");
        let mut out = h.into_bytes();
        for v in self
            .weights
            .iter()
            .chain(self.means.data())
            .chain(self.variances.data())
        {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::GmmFormat(m.into());
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .ok_or_else(|| err("missing SVGM1 magic"))?;
        let marker = b"end\n";
        let pos = rest
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| err("header has no `end` line"))?;
        let header = std::str::from_utf8(&rest[..pos]).map_err(|_| err("header is not UTF-8"))?;
        let (mut k, mut d) = (None, None);
        for line in header.lines() {
            match line.split_once(' ') {
                Some(("K", v)) => k = v.trim().parse::<usize>().ok(),
                Some(("dim", v)) => d = v.trim().parse::<usize>().ok(),
                _ if line.trim().is_empty() => {}
                _ => return Err(err(&format!("bad header line `{line}`"))),
            }
        }
        let (k, d) = (
            k.ok_or_else(|| err("bad K"))?,
            d.ok_or_else(|| err("bad dim"))?,
        );
        let blob = &rest[pos + marker.len()..];
        let n = k + 2 * k * d;
        if blob.len() != 4 * n {
            return Err(err(&format!(
                "expected {} data bytes, found {}",
                4 * n,
                blob.len()
            )));
        }
        let vals: Vec<T> = blob
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Self::new(
            vals[..k].to_vec(),
            Tensor::from_vec(&[k, d], vals[k..k + k * d].to_vec())?,
            Tensor::from_vec(&[k, d], vals[k + k * d..].to_vec())?,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn one_d(means: &[f64], vars: &[f64], w: &[f64]) -> DiagGmm<f64> {
        let k = means.len();
        DiagGmm::new(
            w.to_vec(),
            Tensor::from_vec(&[k, 1], means.to_vec()).unwrap(),
            Tensor::from_vec(&[k, 1], vars.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_peak() {
        let g = one_d(&[0.0], &[1.0], &[1.0]);
        let want = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((gmm_loglik(&g, &[0.0]) - want).abs() < 1e-15);
    }

    #[test]
    fn mixture_bound() {
        let single = one_d(&[-10.0], &[1.0], &[1.0]);
        let mix = one_d(&[-10.0, 10.0], &[1.0, 1.0], &[0.5, 0.5]);
        let gap = gmm_loglik(&single, &[-10.0]) - gmm_loglik(&mix, &[-10.0]);
        assert!(gap >= 0.0 && gap <= 2f64.ln() + 1e-12);
    }

    #[test]
    fn two_cluster_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let data: Vec<f64> = (0..1000)
            .map(|i| if i % 2 == 0 { -5.0 } else { 5.0 } + noise.sample(&mut rng))
            .collect();
        let frames = Tensor::from_vec(&[1000, 1], data).unwrap();
        let run = train_ubm(&frames, 2, 20, 1).unwrap();
        let mut comps: Vec<(f64, f64)> = (0..2)
            .map(|c| (run.gmm.means.data()[c], run.gmm.weights[c]))
            .collect();
        comps.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((comps[0].0 + 5.0).abs() < 0.05 && (comps[1].0 - 5.0).abs() < 0.05);
        assert!((comps[0].1 - 0.5).abs() < 0.05 && (comps[1].1 - 0.5).abs() < 0.05);
        for w in run.ll_trace.windows(2) {
            assert!(w[1] - w[0] >= -1e-8);
        }
    }

    #[test]
    fn single_component_closed_form() {
        let data: Vec<f64> = (0..40)
            .map(|i| ((i * 7) % 13) as f64 * 0.25 - 1.0)
            .collect();
        let frames = Tensor::from_vec(&[20, 2], data.clone()).unwrap();
        let run = train_ubm(&frames, 1, 1, 0).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..20).map(|t| data[t * 2 + c]).collect();
            let mean = col.iter().sum::<f64>() / 20.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 20.0;
            assert!((run.gmm.means.data()[c] - mean).abs() < 1e-12);
            assert!((run.gmm.variances.data()[c] - var).abs() < 1e-12);
        }
        assert!(matches!(
            train_ubm(&frames, 3, 1, 0),
            Err(Error::TooFewFrames { got: 20, need: 30 })
        ));
    }

    #[test]
    fn map_single_component_blend() {
        let ubm = one_d(&[1.0], &[2.0], &[1.0]);
        let frames = Tensor::from_vec(&[4, 1], vec![2.0, 4.0, 3.0, 3.0]).unwrap();
        let a = map_adapt(&ubm, &frames, 16.0).unwrap();
        let want = (4.0 * 3.0 + 16.0 * 1.0) / (4.0 + 16.0);
        assert!((a.means.data()[0] - want).abs() < 1e-14);
        assert_eq!(a.variances, ubm.variances);
        assert_eq!(a.weights, ubm.weights);
        let inf = map_adapt(&ubm, &frames, f64::INFINITY).unwrap();
        assert_eq!(inf.means, ubm.means);
    }

    #[test]
    fn llr_identities() {
        let ubm = one_d(&[-1.0, 2.0], &[1.0, 0.5], &[0.3, 0.7]);
        let frames = Tensor::from_vec(&[3, 1], vec![0.1, 1.9, -3.0]).unwrap();
        assert_eq!(llr_score(&ubm, &ubm, &frames).unwrap(), 0.0);
        let spk = map_adapt(&ubm, &frames, 4.0).unwrap();
        let doubled = Tensor::from_vec(&[6, 1], [frames.data(), frames.data()].concat()).unwrap();
        let a = llr_score(&spk, &ubm, &frames).unwrap();
        let b = llr_score(&spk, &ubm, &doubled).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn file_round_trip() {
        let g = one_d(&[-1.5, 2.25], &[1.0, 0.5], &[0.25, 0.75]);
        let bytes = g.to_bytes().unwrap();
        assert!(bytes.starts_with(b"SVGM1\n"));
        assert_eq!(DiagGmm::<f64>::from_bytes(&bytes).unwrap(), g);
        assert!(DiagGmm::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
