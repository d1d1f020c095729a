//! Deterministic synthetic speakers for self-contained testing.
//!
//! A voice is a harmonic source with a speaker-specific pitch and spectral
//! tilt, shaped by two resonances, plus band-limited breath noise. Each
//! utterance perturbs pitch, resonances, gains and syllable rhythm, so
//! utterances of one speaker are similar but never identical.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio_io::{quantize, write_wav, AudioClip, DatasetManifest, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::Corpus;

const N_HARMONICS: usize = 8;
const TAU: f64 = std::f64::consts::TAU;

#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub f0: f64,
    pub harmonic_gains: [f64; N_HARMONICS],
    /// Resonance centers and bandwidths in Hz.
    pub formants: [(f64, f64); 2],
    /// Band-limited noise: center, bandwidth, level.
    pub noise_band: (f64, f64, f64),
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

impl Voice {
    /// Voice number `index` of the population drawn from `seed`.
    pub fn sample(seed: u64, index: u64) -> Self {
        let mut rng = stream(seed, index);
        let f0 = 100.0 * 2f64.powf(rng.random_range(0.0..1.6));
        let tilt = rng.random_range(0.5..1.6);
        let mut harmonic_gains = [0.0; N_HARMONICS];
        for (h, g) in harmonic_gains.iter_mut().enumerate() {
            *g = ((h + 1) as f64).powf(-tilt) * rng.random_range(0.5..1.0);
        }
        let formants = [
            (
                rng.random_range(400.0..1100.0),
                rng.random_range(80.0..200.0),
            ),
            (
                rng.random_range(1200.0..2800.0),
                rng.random_range(100.0..300.0),
            ),
        ];
        let noise_band = (
            rng.random_range(2500.0..6500.0),
            rng.random_range(400.0..1500.0),
            rng.random_range(0.02..0.12),
        );
        Self {
            f0,
            harmonic_gains,
            formants,
            noise_band,
        }
    }

    /// Renders one utterance of `n_samples`; `rng` drives the per-utterance
    /// variation.
    pub fn render(&self, rng: &mut ChaCha8Rng, n_samples: usize) -> Vec<f32> {
        let jitter = Normal::new(0.0, 1.0).unwrap();
        let f0 = self.f0 * (1.0 + 0.03 * jitter.sample(rng));
        let vibrato_hz = rng.random_range(3.0..6.0);
        let vibrato_depth = rng.random_range(0.0..0.02);
        let formants: Vec<(f64, f64)> = self
            .formants
            .iter()
            .map(|&(c, bw)| (c * (1.0 + 0.04 * jitter.sample(rng)), bw))
            .collect();
        let gains: Vec<f64> = self
            .harmonic_gains
            .iter()
            .map(|g| g * (1.0 + 0.15 * jitter.sample(rng)).max(0.05))
            .collect();
        let syllable_hz = rng.random_range(2.5..5.0);
        let syllable_phase = rng.random_range(0.0..TAU);
        let level = rng.random_range(0.15..0.35);
        let sr = SAMPLE_RATE as f64;

        let mut phase = [0.0f64; N_HARMONICS];
        for p in phase.iter_mut() {
            *p = rng.random_range(0.0..TAU);
        }
        let mut voiced = Vec::with_capacity(n_samples);
        let mut base = 0.0f64;
        for n in 0..n_samples {
            let t = n as f64 / sr;
            let inst = f0 * (1.0 + vibrato_depth * (TAU * vibrato_hz * t).sin());
            base += TAU * inst / sr;
            let mut s = 0.0;
            for (h, &g) in gains.iter().enumerate() {
                let fh = inst * (h + 1) as f64;
                if fh >= sr / 2.0 - 200.0 {
                    break;
                }
                s += g * (base * (h + 1) as f64 + phase[h]).sin();
            }
            voiced.push(s);
        }
        let mut shaped = vec![0.0; n_samples];
        for &(c, bw) in &formants {
            let filtered = bandpass(&voiced, c, bw, sr);
            for (o, v) in shaped.iter_mut().zip(filtered) {
                *o += v;
            }
        }
        for (o, v) in shaped.iter_mut().zip(&voiced) {
            *o += 0.2 * v;
        }

        let white: Vec<f64> = (0..n_samples).map(|_| jitter.sample(rng)).collect();
        let (nc, nbw, nl) = self.noise_band;
        let noise = bandpass(&white, nc, nbw, sr);
        let floor: Vec<f64> = (0..n_samples).map(|_| 0.003 * jitter.sample(rng)).collect();

        let peak = shaped.iter().fold(1e-9f64, |m, v| m.max(v.abs()));
        (0..n_samples)
            .map(|n| {
                let t = n as f64 / sr;
                let env = 0.55 + 0.45 * (TAU * syllable_hz * t + syllable_phase).sin();
                let x = level * (env * shaped[n] / peak + nl * noise[n]) + floor[n];
                // match what a 16-bit WAV round trip would yield
                quantize(x as f32) as f32 / 32768.0
            })
            .collect()
    }
}

/// Constant-peak-gain biquad band-pass.
fn bandpass(x: &[f64], center: f64, bandwidth: f64, sr: f64) -> Vec<f64> {
    let w0 = TAU * center / sr;
    let q = center / bandwidth;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&xn| {
            let y = b0 * xn + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = xn;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

/// Population parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub seconds: f64,
    pub seed: u64,
    /// Offset of the first voice index; disjoint ranges give disjoint speakers.
    pub first_voice: u64,
}

impl SynthSpec {
    /// 20 speakers with 20 utterances of 1.5 s.
    pub fn training(seed: u64) -> Self {
        Self {
            n_speakers: 20,
            utterances_per_speaker: 20,
            seconds: 1.5,
            seed,
            first_voice: 0,
        }
    }

    /// Speakers never seen by [`SynthSpec::training`] with the same seed.
    pub fn held_out(seed: u64) -> Self {
        Self {
            n_speakers: 12,
            utterances_per_speaker: 10,
            seconds: 2.0,
            seed,
            first_voice: 1_000_000,
        }
    }

    pub fn speaker_id(&self, s: usize) -> String {
        format!("spk{:03}", self.first_voice + s as u64)
    }

    pub fn relative_path(&self, s: usize, u: usize) -> String {
        format!("{}/utt{u:02}.wav", self.speaker_id(s))
    }

    /// Renders every utterance in manifest order.
    pub fn render(&self) -> Vec<AudioClip> {
        let n = (self.seconds * SAMPLE_RATE as f64).round() as usize;
        let mut out = Vec::with_capacity(self.n_speakers * self.utterances_per_speaker);
        for s in 0..self.n_speakers {
            let voice_index = self.first_voice + s as u64;
            let voice = Voice::sample(self.seed, voice_index);
            // utterance variation gets its own stream family
            let mut rng = stream(self.seed ^ 0x5_7E77_A7CE, voice_index);
            for u in 0..self.utterances_per_speaker {
                let mut clip = AudioClip::new(voice.render(&mut rng, n), self.relative_path(s, u));
                clip.speaker_label = Some(self.speaker_id(s));
                out.push(clip);
            }
        }
        out
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest::from_entries((0..self.n_speakers).flat_map(|s| {
            (0..self.utterances_per_speaker)
                .map(move |u| (self.relative_path(s, u), self.speaker_id(s)))
        }))
        .expect("synthetic paths are unique")
    }

    pub fn corpus(&self) -> Corpus {
        let manifest = self.manifest();
        Corpus {
            clips: self.render(),
            labels: manifest.labels(),
            speakers: manifest.speakers().to_vec(),
        }
    }

    /// Writes the WAV files and `manifest.tsv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let manifest = self.manifest();
        for clip in self.render() {
            let path = dir.join(&clip.source_path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_wav(&path, &clip)?;
        }
        let mpath = dir.join("manifest.tsv");
        std::fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))?;
        Ok(manifest)
    }
}

/// Frame-level fixture for the GMM baseline: every speaker emits frames from
/// two Gaussian clusters whose centers are a shared pair of population
/// centers shifted by a speaker-specific offset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpeakers {
    pub dim: usize,
    pub population_centers: [Vec<f64>; 2],
    /// Per speaker, the two cluster means.
    pub speakers: Vec<[Vec<f64>; 2]>,
    pub frame_std: f64,
}

impl ClusterSpeakers {
    pub fn new(n_speakers: usize, dim: usize, speaker_spread: f64, seed: u64) -> Self {
        let mut rng = stream(seed, 0xC1);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let population_centers = [
            (0..dim)
                .map(|_| 1.5 * unit.sample(&mut rng))
                .collect::<Vec<_>>(),
            (0..dim)
                .map(|_| 1.5 * unit.sample(&mut rng))
                .collect::<Vec<_>>(),
        ];
        let speakers = (0..n_speakers)
            .map(|_| {
                let offset: Vec<f64> = (0..dim)
                    .map(|_| speaker_spread * unit.sample(&mut rng))
                    .collect();
                let shift = |c: &Vec<f64>| {
                    c.iter()
                        .zip(&offset)
                        .map(|(a, b)| a + b)
                        .collect::<Vec<_>>()
                };
                [shift(&population_centers[0]), shift(&population_centers[1])]
            })
            .collect();
        Self {
            dim,
            population_centers,
            speakers,
            frame_std: 1.0,
        }
    }

    /// `n` frames of speaker `s`, alternating clusters at random.
    pub fn frames<T: Scalar>(&self, s: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let noise = Normal::new(0.0, self.frame_std).unwrap();
        let mut data = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let c = &self.speakers[s][usize::from(rng.random::<bool>())];
            data.extend(c.iter().map(|&m| T::of(m + noise.sample(rng))));
        }
        Tensor::from_vec(&[n, self.dim], data).expect("consistent frame shape")
    }
}
