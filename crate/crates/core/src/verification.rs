//! Enrollment, cosine scoring, trial generation and equal-error-rate evaluation.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio_io::{crop_1s, AudioClip, DatasetManifest, ONE_SECOND};
use crate::dsp::{FeatureMap, Frontend};
use crate::error::{Error, Result};
use crate::nn::model::{Head, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hop between 1 s analysis windows.
pub const WINDOW_HOP: usize = ONE_SECOND / 2;
const ZERO_NORM: f64 = 1e-12;

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Scales `v` to unit length.
pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = norm(v);
    if n.to_f64_lossy() < ZERO_NORM || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Start offsets of the 1 s windows covering a clip of `len` samples.
pub fn window_offsets(len: usize) -> Vec<usize> {
    if len <= ONE_SECOND {
        return vec![0];
    }
    (0..=(len - ONE_SECOND) / WINDOW_HOP)
        .map(|k| k * WINDOW_HOP)
        .collect()
}

/// d-vector of an utterance: mean eval-mode embedding over its 1 s windows,
/// L2-normalized.
pub fn embed_utterance<T: Scalar>(
    net: &Network<T>,
    frontend: &Frontend<T>,
    clip: &AudioClip,
) -> Result<Vec<T>> {
    if clip.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let offsets = window_offsets(clip.len());
    let per = FeatureMap::<T>::SHAPE.iter().product::<usize>();
    let mut data = Vec::with_capacity(offsets.len() * per);
    for &off in &offsets {
        let crop = crop_1s(clip, off)?;
        data.extend_from_slice(frontend.feature_map(&crop)?.data.data());
    }
    let [c, h, w] = FeatureMap::<T>::SHAPE;
    let x = Tensor::from_vec(&[offsets.len(), c, h, w], data)?;
    let emb = net.infer(&x, Head::Embedding)?;
    let (n, d) = emb.dims2()?;
    let mut mean = vec![T::zero(); d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(emb.row(i)) {
            *m += v;
        }
    }
    let nf = T::of_usize(n);
    mean.iter_mut().for_each(|m| *m /= nf);
    l2_normalize(&mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerModel<T> {
    pub speaker_id: String,
    /// Unit-norm mean embedding.
    pub embedding: Vec<T>,
    pub n_utterances: usize,
}

/// Mean of the utterance embeddings, then L2-normalized.
pub fn enroll_speaker<T: Scalar>(
    speaker_id: &str,
    embeddings: &[Vec<T>],
) -> Result<SpeakerModel<T>> {
    let first = embeddings.first().ok_or(Error::NoEmbeddings)?;
    let d = first.len();
    let mut mean = vec![T::zero(); d];
    for e in embeddings {
        if e.len() != d {
            return Err(Error::DimMismatch(d, e.len()));
        }
        for (m, &v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    let nf = T::of_usize(embeddings.len());
    mean.iter_mut().for_each(|m| *m /= nf);
    Ok(SpeakerModel {
        speaker_id: speaker_id.to_string(),
        embedding: l2_normalize(&mean)?,
        n_utterances: embeddings.len(),
    })
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(a.len(), b.len()));
    }
    let a = l2_normalize(a)?;
    let b = l2_normalize(b)?;
    let s: T = a.iter().zip(&b).map(|(&x, &y)| x * y).sum();
    Ok(s.max(-T::one()).min(T::one()))
}

/// `dot(model, e / ‖e‖)`.
pub fn cosine_score<T: Scalar>(model: &SpeakerModel<T>, test_embedding: &[T]) -> Result<T> {
    if model.embedding.len() != test_embedding.len() {
        return Err(Error::DimMismatch(
            model.embedding.len(),
            test_embedding.len(),
        ));
    }
    let e = l2_normalize(test_embedding)?;
    let s: T = model.embedding.iter().zip(&e).map(|(&x, &y)| x * y).sum();
    Ok(s.max(-T::one()).min(T::one()))
}

/// `<speaker_id>\t<n_utterances>\t<space-separated embedding>` per model.
pub fn models_to_text<T: Scalar>(models: &[SpeakerModel<T>]) -> String {
    let mut s = String::new();
    for m in models {
        write!(s, "{}\t{}\t", m.speaker_id, m.n_utterances).unwrap();
        for (i, v) in m.embedding.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn parse_models<T: Scalar>(text: &str) -> Result<Vec<SpeakerModel<T>>> {
    let mut out: Vec<SpeakerModel<T>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.into(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 || f[0].is_empty() {
            return Err(err("expected `<speaker>\\t<count>\\t<embedding>`"));
        }
        let n_utterances = f[1].parse().map_err(|_| err("bad utterance count"))?;
        let embedding = f[2]
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map(T::of)
                    .map_err(|_| err("bad embedding value"))
            })
            .collect::<Result<Vec<T>>>()?;
        if let Some(prev) = out.first() {
            if prev.embedding.len() != embedding.len() {
                return Err(Error::DimMismatch(prev.embedding.len(), embedding.len()));
            }
        }
        out.push(SpeakerModel {
            speaker_id: f[0].to_string(),
            embedding,
            n_utterances,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EerReport {
    pub eer: f64,
    pub threshold: f64,
    /// One point per candidate threshold, ascending.
    pub curve: Vec<CurvePoint>,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

impl EerReport {
    pub fn summary(&self) -> String {
        format!(
            "EER {:.4}\nthreshold {}\ngenuine {}\nimpostor {}\n",
            self.eer, self.threshold, self.n_genuine, self.n_impostor
        )
    }

    /// `<threshold>\t<far>\t<frr>` per line.
    pub fn curve_text(&self) -> String {
        let mut s = String::new();
        for p in &self.curve {
            writeln!(s, "{}\t{}\t{}", p.threshold, p.far, p.frr).unwrap();
        }
        s
    }
}

/// Threshold sweep over the sorted union of all scores plus `±∞`.
///
/// A trial is accepted when `score ≥ θ`: `FRR(θ)` is the fraction of genuine
/// scores below θ and `FAR(θ)` the fraction of impostor scores at or above
/// it. The operating point is the lowest θ minimizing `|FAR − FRR|` and the
/// EER is `(FAR + FRR) / 2` there.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<EerReport> {
    if genuine.is_empty() {
        return Err(Error::EmptySide("genuine"));
    }
    if impostor.is_empty() {
        return Err(Error::EmptySide("impostor"));
    }
    if genuine.iter().chain(impostor).any(|s| s.is_nan()) {
        return Err(Error::Config("scores must not be NaN".into()));
    }
    let mut g = genuine.to_vec();
    let mut im = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    im.sort_by(f64::total_cmp);

    let mut thresholds: Vec<f64> = Vec::with_capacity(g.len() + im.len() + 2);
    thresholds.push(f64::NEG_INFINITY);
    thresholds.extend(g.iter().chain(&im).copied());
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (ng, ni) = (g.len() as f64, im.len() as f64);
    // counts of genuine < θ and impostor < θ, advanced monotonically
    let (mut g_below, mut i_below) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(thresholds.len());
    let mut best: Option<(f64, usize)> = None;
    for (k, &th) in thresholds.iter().enumerate() {
        while g_below < g.len() && g[g_below] < th {
            g_below += 1;
        }
        while i_below < im.len() && im[i_below] < th {
            i_below += 1;
        }
        let frr = g_below as f64 / ng;
        let far = (im.len() - i_below) as f64 / ni;
        curve.push(CurvePoint {
            threshold: th,
            far,
            frr,
        });
        let gap = (far - frr).abs();
        if best.is_none_or(|(b, _)| gap < b) {
            best = Some((gap, k));
        }
    }
    let (_, k) = best.expect("at least two thresholds");
    let p = curve[k];
    Ok(EerReport {
        eer: (p.far + p.frr) / 2.0,
        threshold: p.threshold,
        curve,
        n_genuine: g.len(),
        n_impostor: im.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub genuine: bool,
    pub a: String,
    /// Utterance path or enrolled speaker id.
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    /// `<label: 1|0>\t<path_a>\t<path_b>` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            writeln!(s, "{}\t{}\t{}", u8::from(t.genuine), t.a, t.b).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let genuine = match f.first().copied() {
                Some("1") => true,
                Some("0") => false,
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: "label must be 1 or 0".into(),
                    })
                }
            };
            if f.len() != 3 || f[1].is_empty() || f[2].is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "expected `<label>\\t<a>\\t<b>`".into(),
                });
            }
            trials.push(Trial {
                genuine,
                a: f[1].to_string(),
                b: f[2].to_string(),
            });
        }
        Ok(Self { trials })
    }
}

fn pair_index(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

/// Samples distinct utterance pairs: `n_genuine` same-speaker and
/// `n_impostor` cross-speaker, without replacement.
pub fn generate_trials(
    manifest: &DatasetManifest,
    n_genuine: usize,
    n_impostor: usize,
    seed: u64,
) -> Result<TrialList> {
    if manifest.n_speakers() < 2 {
        return Err(Error::TooFewSpeakers(manifest.n_speakers()));
    }
    let labels = manifest.labels();
    let by_class = manifest.utterances_by_class();
    let n = labels.len();
    let total_pairs = n * (n - 1) / 2;
    let avail_gen: usize = by_class
        .iter()
        .map(|u| u.len() * u.len().saturating_sub(1) / 2)
        .sum();
    let avail_imp = total_pairs - avail_gen;
    if n_genuine > avail_gen || n_impostor > avail_imp {
        return Err(Error::Infeasible(format!(
            "requested {n_genuine} genuine / {n_impostor} impostor, available {avail_gen} / {avail_imp}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let genuine_pairs: Vec<(usize, usize)> = {
        let all: Vec<(usize, usize)> = by_class
            .iter()
            .flat_map(|u| {
                (0..u.len()).flat_map(move |a| (a + 1..u.len()).map(move |b| (u[a], u[b])))
            })
            .collect();
        all.choose_multiple(&mut rng, n_genuine).copied().collect()
    };

    let impostor_pairs: Vec<(usize, usize)> = if n_impostor * 2 <= avail_imp {
        let mut seen = HashSet::with_capacity(n_impostor);
        let mut out = Vec::with_capacity(n_impostor);
        while out.len() < n_impostor {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if labels[i] == labels[j] {
                continue;
            }
            let p = pair_index(i, j);
            if seen.insert(p) {
                out.push(p);
            }
        }
        out
    } else {
        let all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| labels[i] != labels[j])
            .collect();
        all.choose_multiple(&mut rng, n_impostor).copied().collect()
    };

    let path = |i: usize| manifest.entries[i].utterance_path.clone();
    let trials = genuine_pairs
        .into_iter()
        .map(|(i, j)| (true, i, j))
        .chain(impostor_pairs.into_iter().map(|(i, j)| (false, i, j)))
        .map(|(genuine, i, j)| Trial {
            genuine,
            a: path(i),
            b: path(j),
        })
        .collect();
    Ok(TrialList { trials })
}

/// `<label>\t<score>` per line.
pub fn scores_to_text(scores: &[(bool, f64)]) -> String {
    let mut s = String::new();
    for (label, score) in scores {
        writeln!(s, "{}\t{}", u8::from(*label), score).unwrap();
    }
    s
}

/// Splits a score file into `(genuine, impostor)` scores.
pub fn parse_scores(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut g, mut im) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.into(),
        };
        let (label, score) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `<label>\\t<score>`"))?;
        let score: f64 = score.trim().parse().map_err(|_| err("bad score"))?;
        match label.trim() {
            "1" => g.push(score),
            "0" => im.push(score),
            _ => return Err(err("label must be 1 or 0")),
        }
    }
    Ok((g, im))
}
