//! Log-mel feature maps for the CNN and MFCC frames for the GMM-UBM baseline.
//!
//! Framing uses 25 ms periodic Hamming windows with a 10 ms hop at 16 kHz and a
//! 512-point FFT. A 1 s crop is zero-padded to 16240 samples so that exactly
//! 100 frames come out.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio_io::{AudioClip, ONE_SECOND, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FRAME_LEN: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 40;
pub const N_FRAMES: usize = 100;
pub const N_MFCC: usize = 40;
/// Padded length of a 1 s crop: `(N_FRAMES - 1) * HOP + FRAME_LEN`.
pub const PADDED_LEN: usize = (N_FRAMES - 1) * HOP + FRAME_LEN;

pub const LOG_FLOOR: f64 = 1e-10;
pub const CMVN_STD_FLOOR: f64 = 1e-8;
const DELTA_WIDTH: usize = 2;

/// Hz → mel, `2595 log10(1 + f/700)`.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hamming window `0.54 - 0.46 cos(2πn/N)`.
pub fn hamming<T: Scalar>(len: usize) -> Vec<T> {
    (0..len)
        .map(|n| T::of(0.54 - 0.46 * (2.0 * PI * n as f64 / len as f64).cos()))
        .collect()
}

fn frame_grid<T: Scalar>(samples: &[T], n_frames: usize) -> Tensor<T> {
    let window = hamming::<T>(FRAME_LEN);
    let mut out = Tensor::zeros(&[n_frames, FRAME_LEN]);
    let data = out.data_mut();
    for f in 0..n_frames {
        let start = f * HOP;
        let row = &mut data[f * FRAME_LEN..(f + 1) * FRAME_LEN];
        for (n, slot) in row.iter_mut().enumerate() {
            if let Some(&s) = samples.get(start + n) {
                *slot = s * window[n];
            }
        }
    }
    out
}

/// Frames a 1 s signal into a `(100, 400)` windowed matrix.
pub fn frame_signal<T: Scalar>(samples: &[T]) -> Result<Tensor<T>> {
    if samples.len() != ONE_SECOND {
        return Err(Error::WrongLength {
            expected: ONE_SECOND,
            got: samples.len(),
        });
    }
    // samples past the end read as zero, which is the 16240-sample padding
    Ok(frame_grid(samples, N_FRAMES))
}

/// Frames an arbitrary-length signal on the same grid without padding.
pub fn frame_full<T: Scalar>(samples: &[T]) -> Result<Tensor<T>> {
    if samples.len() < FRAME_LEN {
        return Err(Error::TooShort(samples.len()));
    }
    let n_frames = 1 + (samples.len() - FRAME_LEN) / HOP;
    Ok(frame_grid(samples, n_frames))
}

fn plan<T: Scalar>() -> Arc<dyn Fft<T>> {
    FftPlanner::new().plan_fft_forward(N_FFT)
}

fn power_spectrum_with<T: Scalar>(fft: &dyn Fft<T>, frames: &Tensor<T>) -> Result<Tensor<T>> {
    let (n_frames, len) = frames.dims2()?;
    if len > N_FFT {
        return Err(Error::ShapeMismatch(format!(
            "frame length {len} exceeds FFT size {N_FFT}"
        )));
    }
    let mut out = Tensor::zeros(&[n_frames, N_BINS]);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); N_FFT];
    for f in 0..n_frames {
        for (slot, &x) in buf.iter_mut().zip(frames.row(f)) {
            *slot = Complex::new(x, T::zero());
        }
        for slot in buf.iter_mut().skip(len) {
            *slot = Complex::new(T::zero(), T::zero());
        }
        fft.process(&mut buf);
        let row = &mut out.data_mut()[f * N_BINS..(f + 1) * N_BINS];
        for (p, c) in row.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
    }
    Ok(out)
}

/// One-sided power spectrum `|X[k]|²`, `k ∈ [0, 256]`, of each zero-padded frame.
pub fn power_spectrum<T: Scalar>(frames: &Tensor<T>) -> Result<Tensor<T>> {
    power_spectrum_with(plan::<T>().as_ref(), frames)
}

/// Centre frequency of FFT bin `k`.
pub fn bin_hz(k: usize) -> f64 {
    k as f64 * SAMPLE_RATE as f64 / N_FFT as f64
}

/// The `n_filters + 2` band edges (Hz), evenly spaced in mel over `[0, 8000]`.
pub fn mel_edges(n_filters: usize) -> Vec<f64> {
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    (0..n_filters + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_filters + 1) as f64))
        .collect()
}

/// Triangular mel filterbank, shape `(n_filters, 257)`.
pub fn mel_filterbank<T: Scalar>(n_filters: usize) -> Tensor<T> {
    let edges = mel_edges(n_filters);
    let mut fb = Tensor::zeros(&[n_filters, N_BINS]);
    let data = fb.data_mut();
    for i in 0..n_filters {
        let (lo, mid, hi) = (edges[i], edges[i + 1], edges[i + 2]);
        for k in 0..N_BINS {
            let f = bin_hz(k);
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            data[i * N_BINS + k] = T::of(w);
        }
    }
    fb
}

/// Floored natural-log filterbank energies, shape `(bands, frames)`.
pub fn log_mel<T: Scalar>(spectrum: &Tensor<T>, fbank: &Tensor<T>) -> Result<Tensor<T>> {
    let (n_frames, bins) = spectrum.dims2()?;
    let (n_bands, fb_bins) = fbank.dims2()?;
    if bins != fb_bins {
        return Err(Error::ShapeMismatch(format!(
            "spectrum has {bins} bins, filterbank {fb_bins}"
        )));
    }
    let floor = T::of(LOG_FLOOR);
    let mut out = Tensor::zeros(&[n_bands, n_frames]);
    let data = out.data_mut();
    for t in 0..n_frames {
        let spec = spectrum.row(t);
        for b in 0..n_bands {
            let e: T = fbank.row(b).iter().zip(spec).map(|(&w, &p)| w * p).sum();
            data[b * n_frames + t] = e.max(floor).ln();
        }
    }
    Ok(out)
}

/// Regression deltas over the frame axis with edge replication (window ±2).
pub fn deltas<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = x.dims2()?;
    let denom = T::of_usize(2 * (1..=DELTA_WIDTH).map(|n| n * n).sum::<usize>());
    let mut out = Tensor::zeros(&[rows, cols]);
    let last = cols as isize - 1;
    let clamp = |t: isize| t.clamp(0, last) as usize;
    for r in 0..rows {
        let src = x.row(r);
        for t in 0..cols {
            let mut acc = T::zero();
            for n in 1..=DELTA_WIDTH {
                let ahead = src[clamp(t as isize + n as isize)];
                let behind = src[clamp(t as isize - n as isize)];
                acc += T::of_usize(n) * (ahead - behind);
            }
            out.data_mut()[r * cols + t] = acc / denom;
        }
    }
    Ok(out)
}

/// Stacked `(3, 40, 100)` log-mel, delta and delta-delta input for the CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub const SHAPE: [usize; 3] = [3, N_MELS, N_FRAMES];

    pub fn from_tensor(data: Tensor<T>) -> Result<Self> {
        if data.shape() != Self::SHAPE {
            return Err(Error::ShapeMismatch(format!(
                "feature map must be {:?}, got {:?}",
                Self::SHAPE,
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = N_MELS * N_FRAMES;
        &self.data.data()[c * n..(c + 1) * n]
    }

    /// Writes the `VERID-FEAT` dump: a text header then little-endian f32, channel-major.
    pub fn write_dump(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "VERID-FEAT 1 3 {N_MELS} {N_FRAMES}")?;
        for v in self.data.data() {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(bytes: &[u8]) -> Result<Self> {
        let header = format!("VERID-FEAT 1 3 {N_MELS} {N_FRAMES}\n");
        let body = bytes
            .strip_prefix(header.as_bytes())
            .ok_or_else(|| Error::ShapeMismatch("bad VERID-FEAT header".into()))?;
        let n = 3 * N_MELS * N_FRAMES;
        if body.len() != 4 * n {
            return Err(Error::ShapeMismatch(format!(
                "VERID-FEAT body has {} bytes, expected {}",
                body.len(),
                4 * n
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Self::from_tensor(Tensor::from_vec(&Self::SHAPE, data)?)
    }

    pub fn save_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_dump(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Per-utterance MFCC matrix `(T, 40)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccFrames<T> {
    pub data: Tensor<T>,
    pub cmvn_applied: bool,
}

impl<T: Scalar> MfccFrames<T> {
    pub fn n_frames(&self) -> usize {
        self.data.shape()[0]
    }
}

/// Orthonormal DCT-II matrix; row `k` holds basis vector `k`.
pub fn dct_matrix<T: Scalar>(n: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[n, n]);
    let data = m.data_mut();
    for k in 0..n {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            data[k * n + i] =
                T::of(scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos());
        }
    }
    m
}

/// Shared filterbank, FFT plan and DCT basis for repeated extraction.
pub struct Frontend<T: Scalar> {
    fbank: Tensor<T>,
    dct: Tensor<T>,
    fft: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Default for Frontend<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Frontend<T> {
    pub fn new() -> Self {
        Self {
            fbank: mel_filterbank(N_MELS),
            dct: dct_matrix(N_MFCC),
            fft: plan(),
        }
    }

    pub fn filterbank(&self) -> &Tensor<T> {
        &self.fbank
    }

    fn samples_of(clip: &AudioClip) -> Vec<T> {
        clip.samples.iter().map(|&s| T::of(s as f64)).collect()
    }

    /// Log-mel energies `(40, 100)` of a 1 s crop.
    pub fn log_mel_1s(&self, clip: &AudioClip) -> Result<Tensor<T>> {
        let frames = frame_signal(&Self::samples_of(clip))?;
        let spec = power_spectrum_with(self.fft.as_ref(), &frames)?;
        log_mel(&spec, &self.fbank)
    }

    pub fn feature_map(&self, clip: &AudioClip) -> Result<FeatureMap<T>> {
        let base = self.log_mel_1s(clip)?;
        let d1 = deltas(&base)?;
        let d2 = deltas(&d1)?;
        let mut data = Vec::with_capacity(3 * N_MELS * N_FRAMES);
        data.extend_from_slice(base.data());
        data.extend_from_slice(d1.data());
        data.extend_from_slice(d2.data());
        FeatureMap::from_tensor(Tensor::from_vec(&FeatureMap::<T>::SHAPE, data)?)
    }

    /// MFCCs over the whole clip, no normalization.
    pub fn mfcc(&self, clip: &AudioClip) -> Result<MfccFrames<T>> {
        let frames = frame_full(&Self::samples_of(clip))?;
        let spec = power_spectrum_with(self.fft.as_ref(), &frames)?;
        let energies = log_mel(&spec, &self.fbank)?;
        let n_frames = frames.shape()[0];
        let mut out = Tensor::zeros(&[n_frames, N_MFCC]);
        let mut column = vec![T::zero(); N_MELS];
        for t in 0..n_frames {
            for (b, slot) in column.iter_mut().enumerate() {
                *slot = energies.data()[b * n_frames + t];
            }
            for k in 0..N_MFCC {
                let c: T = self
                    .dct
                    .row(k)
                    .iter()
                    .zip(&column)
                    .map(|(&a, &b)| a * b)
                    .sum();
                out.data_mut()[t * N_MFCC + k] = c;
            }
        }
        Ok(MfccFrames {
            data: out,
            cmvn_applied: false,
        })
    }
}

/// Per-coefficient mean and variance normalization over the utterance.
pub fn cmvn<T: Scalar>(frames: &MfccFrames<T>) -> MfccFrames<T> {
    let (n, d) = frames.data.dims2().expect("MFCC frames are 2-d");
    let mut out = frames.data.clone();
    let nf = T::of_usize(n);
    let floor = T::of(CMVN_STD_FLOOR);
    for c in 0..d {
        let mean = (0..n).map(|t| frames.data.data()[t * d + c]).sum::<T>() / nf;
        let var = (0..n)
            .map(|t| {
                let v = frames.data.data()[t * d + c] - mean;
                v * v
            })
            .sum::<T>()
            / nf;
        let std = var.sqrt().max(floor);
        for t in 0..n {
            let v = &mut out.data_mut()[t * d + c];
            *v = (*v - mean) / std;
        }
    }
    MfccFrames {
        data: out,
        cmvn_applied: true,
    }
}

/// Convenience wrapper building a fresh [`Frontend`].
pub fn feature_map<T: Scalar>(clip: &AudioClip) -> Result<FeatureMap<T>> {
    Frontend::new().feature_map(clip)
}

pub fn mfcc<T: Scalar>(clip: &AudioClip) -> Result<MfccFrames<T>> {
    Frontend::new().mfcc(clip)
}
