//! Two-phase training: softmax speaker classification, then Siamese
//! fine-tuning of the same network under the contrastive loss with online pair
//! selection.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio_io::{crop_1s, ingest, AudioClip, DatasetManifest, ONE_SECOND};
use crate::dsp::{FeatureMap, Frontend};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{EpochStats, ModelCheckpoint, Phase};
use crate::nn::loss::{contrastive_loss, softmax_xent, ContrastiveConfig};
use crate::nn::model::{Head, ModelParams, ModelSpec, Network, ParamRole};
use crate::nn::optim::Sgd;
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairStrategy {
    /// Every unordered pair in the batch.
    All,
    /// All genuine pairs plus as many of the closest impostor pairs.
    HardNegative,
}

impl FromStr for PairStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(PairStrategy::All),
            "hard-negative" => Ok(PairStrategy::HardNegative),
            _ => Err(Error::Config(format!("unknown pair strategy `{s}`"))),
        }
    }
}

impl fmt::Display for PairStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairStrategy::All => "all",
            PairStrategy::HardNegative => "hard-negative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    Softmax,
    Siamese,
}

impl FromStr for TrainPhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(TrainPhase::Softmax),
            "siamese" => Ok(TrainPhase::Siamese),
            _ => Err(Error::Config(format!("unknown phase `{s}`"))),
        }
    }
}

impl fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainPhase::Softmax => "softmax",
            TrainPhase::Siamese => "siamese",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase: TrainPhase,
    pub lr: f64,
    pub epochs: usize,
    /// Softmax-phase batch size. The Siamese phase uses
    /// `speakers_per_batch × utterances_per_speaker`.
    pub batch_size: usize,
    pub margin: f64,
    pub lambda: f64,
    pub seed: u64,
    pub pair_strategy: PairStrategy,
    pub momentum: f64,
    pub speakers_per_batch: usize,
    pub utterances_per_speaker: usize,
}

impl TrainConfig {
    pub fn softmax() -> Self {
        Self {
            phase: TrainPhase::Softmax,
            lr: 0.001,
            epochs: 10,
            batch_size: 32,
            margin: 1.0,
            lambda: 1e-4,
            seed: 1,
            pair_strategy: PairStrategy::HardNegative,
            momentum: 0.9,
            speakers_per_batch: 8,
            utterances_per_speaker: 4,
        }
    }

    pub fn siamese() -> Self {
        Self {
            phase: TrainPhase::Siamese,
            lr: 0.00001,
            epochs: 20,
            ..Self::softmax()
        }
    }

    pub fn for_phase(phase: TrainPhase) -> Self {
        match phase {
            TrainPhase::Softmax => Self::softmax(),
            TrainPhase::Siamese => Self::siamese(),
        }
    }

    pub fn siamese_batch(&self) -> usize {
        self.speakers_per_batch * self.utterances_per_speaker
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        ContrastiveConfig {
            margin: self.margin,
            lambda: self.lambda,
        }
        .validate()?;
        match self.phase {
            TrainPhase::Softmax if self.batch_size < 2 => bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )),
            TrainPhase::Siamese if self.siamese_batch() < 4 => bad(format!(
                "siamese batch must hold at least 4 items, got {}",
                self.siamese_batch()
            )),
            _ => Ok(()),
        }
    }

    /// Applies `key=value` lines (blank lines and `#` comments ignored) on top
    /// of `self`. Keys are the field names.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
        }
        match key {
            "phase" => self.phase = value.parse()?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "margin" => self.margin = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "pair_strategy" => self.pair_strategy = value.parse()?,
            "momentum" => self.momentum = num(key, value)?,
            "speakers_per_batch" => self.speakers_per_batch = num(key, value)?,
            "utterances_per_speaker" => self.utterances_per_speaker = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "phase={}\nlr={}\nepochs={}\nbatch_size={}\nmargin={}\nlambda={}\nseed={}\npair_strategy={}\nmomentum={}\nspeakers_per_batch={}\nutterances_per_speaker={}\n",
            self.phase,
            self.lr,
            self.epochs,
            self.batch_size,
            self.margin,
            self.lambda,
            self.seed,
            self.pair_strategy,
            self.momentum,
            self.speakers_per_batch,
            self.utterances_per_speaker
        )
    }

    fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            margin: self.margin,
            lambda: self.lambda,
        }
    }
}

/// Labeled utterances held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub clips: Vec<AudioClip>,
    /// Dense class index per clip.
    pub labels: Vec<usize>,
    pub speakers: Vec<String>,
}

impl Corpus {
    /// Loads every manifest entry, resolving relative paths against `base_dir`.
    pub fn load(manifest: &DatasetManifest, base_dir: &Path) -> Result<Self> {
        let clips = (0..manifest.entries.len())
            .map(|i| {
                let mut clip = ingest(manifest.resolve(base_dir, i))?;
                clip.speaker_label = Some(manifest.entries[i].speaker_id.clone());
                Ok(clip)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clips,
            labels: manifest.labels(),
            speakers: manifest.speakers().to_vec(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.speakers.len()
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Uniform random 1 s crop offset.
fn random_offset(rng: &mut ChaCha8Rng, clip: &AudioClip) -> usize {
    if clip.len() > ONE_SECOND {
        rng.random_range(0..=clip.len() - ONE_SECOND)
    } else {
        0
    }
}

fn batch_features<T: Scalar>(
    frontend: &Frontend<T>,
    corpus: &Corpus,
    items: &[(usize, usize)],
) -> Result<Tensor<T>> {
    let per = FeatureMap::<T>::SHAPE.iter().product::<usize>();
    let mut data = Vec::with_capacity(items.len() * per);
    for &(idx, offset) in items {
        let crop = crop_1s(&corpus.clips[idx], offset)?;
        data.extend_from_slice(frontend.feature_map(&crop)?.data.data());
    }
    let [c, h, w] = FeatureMap::<T>::SHAPE;
    Tensor::from_vec(&[items.len(), c, h, w], data)
}

/// Applies weight decay to `grads` and steps every trainable tensor.
fn apply_update<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &mut ModelParams<T>,
    opt: &mut Sgd<T>,
    spec: &ModelSpec,
    lambda: f64,
    include_head: bool,
) -> Result<()> {
    let layout = spec.tensor_layout()?;
    let two_lambda = T::of(2.0 * lambda);
    let trainable = |slot: &crate::nn::model::TensorSlot| {
        slot.role != ParamRole::Running && (include_head || !slot.is_classifier_head())
    };
    {
        let ps = params.tensors();
        for ((slot, g), p) in layout.iter().zip(grads.tensors_mut()).zip(ps) {
            if slot.role == ParamRole::Weight && trainable(slot) && lambda > 0.0 {
                g.add_scaled(p, two_lambda)?;
            }
        }
    }
    let mut ps: Vec<&mut Tensor<T>> = params
        .tensors_mut()
        .into_iter()
        .zip(&layout)
        .filter(|(_, s)| trainable(s))
        .map(|(t, _)| t)
        .collect();
    let gs: Vec<&Tensor<T>> = grads
        .tensors()
        .into_iter()
        .zip(&layout)
        .filter(|(_, s)| trainable(s))
        .map(|(t, _)| t)
        .collect();
    opt.step(&mut ps, &gs)
}

/// Softmax pretraining of a freshly initialized network.
///
/// `on_epoch` receives the 1-based epoch number and its statistics.
pub fn pretrain_softmax(
    corpus: &Corpus,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochStats),
) -> Result<ModelCheckpoint<f32>> {
    cfg.validate()?;
    if corpus.n_classes() < 2 {
        return Err(Error::TooFewSpeakers(corpus.n_classes()));
    }
    if spec.n_classes != corpus.n_classes() {
        return Err(Error::SpecMismatch(format!(
            "spec has {} classes, corpus {}",
            spec.n_classes,
            corpus.n_classes()
        )));
    }
    let mut net = Network::<f32>::init(spec.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_50F7);
    let frontend = Frontend::<f32>::new();
    let mut opt = Sgd::new(cfg.lr as f32, cfg.momentum as f32);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let items: Vec<(usize, usize)> = order
            .iter()
            .map(|&i| (i, random_offset(&mut rng, &corpus.clips[i])))
            .collect();

        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for chunk in items.chunks(cfg.batch_size) {
            // batch norm needs at least two items
            if chunk.len() < 2 {
                continue;
            }
            let x = batch_features(&frontend, corpus, chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&(i, _)| corpus.labels[i]).collect();
            let logits = net.forward(&x, Mode::Train, Head::Classifier)?;
            let (loss, grad) = softmax_xent(&logits, &labels)?;
            for (b, &l) in labels.iter().enumerate() {
                if argmax(logits.row(b)) == l {
                    correct += 1;
                }
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            seen += chunk.len();

            let mut grads = net.backward(&grad)?;
            net.clear_trace();
            apply_update(
                &mut net.params,
                &mut grads,
                &mut opt,
                spec,
                cfg.lambda,
                true,
            )?;
        }
        let stats = EpochStats {
            loss: loss_sum / seen.max(1) as f64,
            accuracy: correct as f64 / seen.max(1) as f64,
        };
        on_epoch(epoch, &stats);
        history.push(stats);
    }

    Ok(ModelCheckpoint {
        spec: spec.clone(),
        params: net.params,
        phase: Phase::Softmax,
        seed: cfg.seed,
        epoch: cfg.epochs,
        history,
    })
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Index pairs into a batch with their genuine (1) / impostor (0) labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<u8>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Chooses training pairs from a batch of embeddings. Pairs are returned in
/// lexicographic `(i, j)` order with `i < j`.
pub fn select_pairs<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    strategy: PairStrategy,
) -> Result<PairBatch> {
    let (b, d) = embeddings.dims2()?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {b} embeddings",
            labels.len()
        )));
    }
    if b < 4 {
        return Err(Error::BatchTooSmall { got: b, need: 4 });
    }
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..b {
        for j in i + 1..b {
            if labels[i] == labels[j] {
                genuine.push((i, j));
            } else {
                impostor.push((i, j));
            }
        }
    }
    let chosen_impostors = match strategy {
        PairStrategy::All => impostor,
        PairStrategy::HardNegative => {
            let dist = |&(i, j): &(usize, usize)| -> f64 {
                (0..d)
                    .map(|k| {
                        let v = (embeddings.row(i)[k] - embeddings.row(j)[k]).to_f64_lossy();
                        v * v
                    })
                    .sum::<f64>()
            };
            let mut scored: Vec<(f64, (usize, usize))> =
                impostor.iter().map(|p| (dist(p), *p)).collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            scored.truncate(genuine.len());
            scored.into_iter().map(|(_, p)| p).collect()
        }
    };
    let mut all: Vec<((usize, usize), u8)> = genuine
        .into_iter()
        .map(|p| (p, 1))
        .chain(chosen_impostors.into_iter().map(|p| (p, 0)))
        .collect();
    all.sort_by_key(|&(p, _)| p);
    Ok(PairBatch {
        pairs: all.iter().map(|&(p, _)| p).collect(),
        labels: all.iter().map(|&(_, l)| l).collect(),
    })
}

/// Per-item gradient of the contrastive loss over `pairs`, plus the loss and
/// the number of pairs on the correct side of `margin / 2`.
pub fn siamese_objective<T: Scalar>(
    embeddings: &Tensor<T>,
    pairs: &PairBatch,
    cfg: &ContrastiveConfig,
) -> Result<(T, Tensor<T>, usize)> {
    let (b, d) = embeddings.dims2()?;
    let n = pairs.len();
    let mut e1 = Vec::with_capacity(n * d);
    let mut e2 = Vec::with_capacity(n * d);
    for &(i, j) in &pairs.pairs {
        e1.extend_from_slice(embeddings.row(i));
        e2.extend_from_slice(embeddings.row(j));
    }
    let e1 = Tensor::from_vec(&[n, d], e1)?;
    let e2 = Tensor::from_vec(&[n, d], e2)?;
    let out = contrastive_loss(&e1, &e2, &pairs.labels, cfg)?;
    let mut grad = Tensor::zeros(&[b, d]);
    for (p, &(i, j)) in pairs.pairs.iter().enumerate() {
        for k in 0..d {
            grad.data_mut()[i * d + k] += out.grad_e1.row(p)[k];
            grad.data_mut()[j * d + k] += out.grad_e2.row(p)[k];
        }
    }
    let half = T::of(cfg.margin / 2.0);
    let correct = out
        .distances
        .iter()
        .zip(&pairs.labels)
        .filter(|(&dist, &y)| (y == 1) == (dist < half))
        .count();
    Ok((out.loss, grad, correct))
}

/// Draws one Siamese batch: up to `P` distinct speakers, `K` crops each.
fn siamese_batch(
    rng: &mut ChaCha8Rng,
    corpus: &Corpus,
    by_class: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Vec<(usize, usize)> {
    let mut speakers: Vec<usize> = (0..by_class.len())
        .filter(|&c| !by_class[c].is_empty())
        .collect();
    speakers.shuffle(rng);
    speakers.truncate(cfg.speakers_per_batch);
    speakers.sort_unstable();
    let mut items = Vec::with_capacity(cfg.siamese_batch());
    for s in speakers {
        let pool = &by_class[s];
        let picks: Vec<usize> = if pool.len() >= cfg.utterances_per_speaker {
            pool.choose_multiple(rng, cfg.utterances_per_speaker)
                .copied()
                .collect()
        } else {
            (0..cfg.utterances_per_speaker)
                .map(|_| pool[rng.random_range(0..pool.len())])
                .collect()
        };
        for idx in picks {
            let off = random_offset(rng, &corpus.clips[idx]);
            items.push((idx, off));
        }
    }
    items
}

/// Fine-tunes every layer below fc-3 as a weight-sharing Siamese network.
pub fn finetune_siamese(
    checkpoint: &ModelCheckpoint<f32>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochStats),
) -> Result<ModelCheckpoint<f32>> {
    cfg.validate()?;
    if cfg.siamese_batch() < 4 {
        return Err(Error::BatchTooSmall {
            got: cfg.siamese_batch(),
            need: 4,
        });
    }
    let spec = checkpoint.spec.clone();
    let mut net = Network::new(spec.clone(), checkpoint.params.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5A3E);
    let frontend = Frontend::<f32>::new();
    let mut opt = Sgd::new(cfg.lr as f32, cfg.momentum as f32);
    let by_class = corpus.by_class();
    let contrastive = cfg.contrastive();
    let batches_per_epoch = corpus.len().div_ceil(cfg.siamese_batch()).max(1);
    let mut history = checkpoint.history.clone();

    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut correct, mut n_pairs, mut n_batches) =
            (0.0f64, 0usize, 0usize, 0usize);
        for _ in 0..batches_per_epoch {
            let items = siamese_batch(&mut rng, corpus, &by_class, cfg);
            if items.len() < 4 {
                return Err(Error::BatchTooSmall {
                    got: items.len(),
                    need: 4,
                });
            }
            let labels: Vec<usize> = items.iter().map(|&(i, _)| corpus.labels[i]).collect();
            let x = batch_features(&frontend, corpus, &items)?;
            let emb = net.forward(&x, Mode::Train, Head::Embedding)?;
            let pairs = select_pairs(&emb, &labels, cfg.pair_strategy)?;
            if pairs.is_empty() {
                net.clear_trace();
                continue;
            }
            let (loss, grad, ok) = siamese_objective(&emb, &pairs, &contrastive)?;
            loss_sum += loss as f64;
            correct += ok;
            n_pairs += pairs.len();
            n_batches += 1;

            let mut grads = net.backward(&grad)?;
            net.clear_trace();
            apply_update(
                &mut net.params,
                &mut grads,
                &mut opt,
                &spec,
                cfg.lambda,
                false,
            )?;
        }
        let stats = EpochStats {
            loss: loss_sum / n_batches.max(1) as f64,
            accuracy: correct as f64 / n_pairs.max(1) as f64,
        };
        on_epoch(epoch, &stats);
        history.push(stats);
    }

    Ok(ModelCheckpoint {
        spec,
        params: net.params,
        phase: Phase::Siamese,
        seed: cfg.seed,
        epoch: cfg.epochs,
        history,
    })
}

/// The log line written once per epoch.
pub fn epoch_log_line(epoch: usize, stats: &EpochStats) -> String {
    format!(
        "epoch {epoch} loss {:.6} acc {:.4}",
        stats.loss, stats.accuracy
    )
}
