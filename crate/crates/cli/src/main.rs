//! `verid` command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use verid::audio_io::{crop_1s, ingest, load_manifest, DatasetManifest};
use verid::dsp::{cmvn, Frontend};
use verid::gmm::{self, llr_score, map_adapt, train_ubm, DiagGmm};
use verid::nn::{ModelCheckpoint, ModelSpec, Network};
use verid::synth::SynthSpec;
use verid::training::{
    epoch_log_line, finetune_siamese, pretrain_softmax, Corpus, TrainConfig, TrainPhase,
};
use verid::verification::{
    compute_eer, cosine_score, cosine_similarity, embed_utterance, enroll_speaker, generate_trials,
    models_to_text, parse_models, parse_scores, scores_to_text, SpeakerModel, TrialList,
};
use verid::{Tensor, VERSION};

#[derive(Parser)]
#[command(name = "verid", version, about = "Speaker verification toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// Dataset manifest (`path<TAB>speaker` per line).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Model checkpoint to read.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key=value` training parameters.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Accepted for interface compatibility; work runs on one thread so that
    /// results are bit-reproducible.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Arch {
    Full,
    Compact,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write 3x40x100 feature dumps for the first second of every utterance.
    Extract {
        #[arg(long, default_value_t = 0)]
        offset: usize,
    },
    /// Softmax pretraining from scratch.
    TrainSoftmax {
        #[arg(long, value_enum, default_value = "full")]
        model: Arch,
        /// Overrides a config key; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Siamese fine-tuning of a pretrained checkpoint.
    TrainSiamese {
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Build unit-norm speaker models from the manifest utterances.
    Enroll,
    /// Sample genuine and impostor utterance pairs.
    Trials {
        #[arg(long)]
        genuine: usize,
        #[arg(long)]
        impostor: usize,
    },
    /// Cosine-score a trial list.
    Score {
        #[arg(long)]
        trials: PathBuf,
        /// Enrolled models; a trial b-side naming one of them is scored against it.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Directory trial paths are relative to (default: the trial file's).
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Equal error rate of a score file.
    Eer {
        #[arg(long)]
        scores: PathBuf,
        /// Threshold sweep output.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Train the universal background model on MFCC+CMVN frames.
    UbmTrain {
        #[arg(long, default_value_t = gmm::DEFAULT_COMPONENTS)]
        components: usize,
        #[arg(long, default_value_t = gmm::DEFAULT_ITERS)]
        iters: usize,
    },
    /// MAP-adapt one model per speaker.
    UbmAdapt {
        #[arg(long)]
        ubm: PathBuf,
        #[arg(long, default_value_t = gmm::DEFAULT_RELEVANCE)]
        relevance: f64,
    },
    /// Log-likelihood-ratio scoring of a trial list.
    UbmScore {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        ubm: PathBuf,
        /// Directory of `<speaker>.gmm` models; other b-sides are adapted on the fly.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, default_value_t = gmm::DEFAULT_RELEVANCE)]
        relevance: f64,
    },
    /// Generate the synthetic-speaker dataset.
    SynthFixture {
        /// Speakers disjoint from the training population.
        #[arg(long)]
        held_out: bool,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        utterances: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Extract { .. } => "extract",
            Cmd::TrainSoftmax { .. } => "train-softmax",
            Cmd::TrainSiamese { .. } => "train-siamese",
            Cmd::Enroll => "enroll",
            Cmd::Trials { .. } => "trials",
            Cmd::Score { .. } => "score",
            Cmd::Eer { .. } => "eer",
            Cmd::UbmTrain { .. } => "ubm-train",
            Cmd::UbmAdapt { .. } => "ubm-adapt",
            Cmd::UbmScore { .. } => "ubm-score",
            Cmd::SynthFixture { .. } => "synth-fixture",
        }
    }
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<verid::Error> for Failure {
    fn from(e: verid::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Outcome<&'a T> {
    v.as_ref()
        .ok_or_else(|| Failure::Usage(format!("missing required flag --{flag}")))
}

fn input(path: &Path) -> Outcome<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure::Data(format!(
            "input {} does not exist",
            path.display()
        )))
    }
}

/// Checks that the output's parent directory exists.
fn output(path: &Path) -> Outcome<&Path> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Failure::Data(format!(
            "output directory {} does not exist",
            p.display()
        ))),
        _ => Ok(path),
    }
}

/// Creates `dir` if its parent exists.
fn output_dir(dir: &Path) -> Outcome<&Path> {
    output(dir)?;
    fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(input(path)?).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn digest(path: &Path) -> String {
    match fs::read(path) {
        Ok(bytes) => hex::encode(&Sha256::digest(&bytes)[..8]),
        Err(_) => "missing".into(),
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

struct Run<'a> {
    common: &'a Common,
    seed: u64,
}

impl Run<'_> {
    fn manifest(&self) -> Outcome<(DatasetManifest, PathBuf)> {
        let path = required(&self.common.manifest, "manifest")?;
        Ok((load_manifest(input(path)?)?, base_dir(path)))
    }

    fn corpus(&self) -> Outcome<Corpus> {
        let (m, base) = self.manifest()?;
        Ok(Corpus::load(&m, &base)?)
    }

    fn checkpoint(&self) -> Outcome<ModelCheckpoint<f32>> {
        let path = required(&self.common.checkpoint, "checkpoint")?;
        Ok(ModelCheckpoint::load(input(path)?)?)
    }

    fn out(&self) -> Outcome<&Path> {
        output(required(&self.common.out, "out")?)
    }

    fn train_config(&self, phase: TrainPhase, overrides: &[String]) -> Outcome<TrainConfig> {
        let mut cfg = TrainConfig::for_phase(phase);
        if let Some(path) = &self.common.config {
            cfg.apply_text(&read_text(path)?)?;
        }
        for kv in overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if self.common.seed.is_some() {
            cfg.seed = self.seed;
        }
        cfg.phase = phase;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn mfcc_frames(fe: &Frontend<f64>, path: &Path) -> Outcome<Tensor<f64>> {
    let clip = ingest(path)?;
    Ok(cmvn(&fe.mfcc(&clip)?).data)
}

fn stack_frames(parts: &[Tensor<f64>]) -> Outcome<Tensor<f64>> {
    let d = parts.first().map_or(0, |t| t.shape()[1]);
    let n: usize = parts.iter().map(|t| t.shape()[0]).sum();
    let data: Vec<f64> = parts
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Ok(Tensor::from_vec(&[n, d], data)?)
}

fn model_file_name(speaker: &str) -> Outcome<String> {
    if speaker.contains(['/', '\\']) || speaker.starts_with('.') {
        return Err(Failure::Data(format!(
            "speaker id `{speaker}` is not a safe file name"
        )));
    }
    Ok(format!("{speaker}.gmm"))
}

fn execute(cmd: &Cmd, run: &Run) -> Outcome {
    match cmd {
        Cmd::SynthFixture {
            held_out,
            speakers,
            utterances,
            seconds,
        } => {
            let mut spec = if *held_out {
                SynthSpec::held_out(run.seed)
            } else {
                SynthSpec::training(run.seed)
            };
            spec.n_speakers = speakers.unwrap_or(spec.n_speakers);
            spec.utterances_per_speaker = utterances.unwrap_or(spec.utterances_per_speaker);
            spec.seconds = seconds.unwrap_or(spec.seconds);
            if spec.n_speakers == 0 || spec.utterances_per_speaker == 0 || !(spec.seconds > 0.0) {
                return Err(Failure::Usage("fixture dimensions must be positive".into()));
            }
            let dir = output_dir(required(&run.common.out, "out")?)?;
            let m = spec.write(dir)?;
            println!(
                "wrote {} utterances of {} speakers to {}",
                m.entries.len(),
                m.n_speakers(),
                dir.join("manifest.tsv").display()
            );
        }
        Cmd::Extract { offset } => {
            let (m, base) = run.manifest()?;
            let dir = output_dir(required(&run.common.out, "out")?)?;
            let fe = Frontend::<f32>::new();
            for i in 0..m.entries.len() {
                let clip = ingest(m.resolve(&base, i))?;
                let fm = fe.feature_map(&crop_1s(&clip, *offset)?)?;
                let dest = dir.join(format!("{}.feat", m.entries[i].utterance_path));
                if let Some(p) = dest.parent() {
                    fs::create_dir_all(p)
                        .map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
                }
                fm.save_dump(&dest)?;
            }
            println!("extracted {} feature maps", m.entries.len());
        }
        Cmd::TrainSoftmax { model, set } => {
            let cfg = run.train_config(TrainPhase::Softmax, set)?;
            let out = run.out()?;
            let corpus = run.corpus()?;
            let spec = match model {
                Arch::Full => ModelSpec::full(corpus.n_classes()),
                Arch::Compact => ModelSpec::compact(corpus.n_classes()),
            };
            let ck = pretrain_softmax(&corpus, &spec, &cfg, |e, s| {
                println!("{}", epoch_log_line(e, s))
            })?;
            ck.save(out)?;
        }
        Cmd::TrainSiamese { set } => {
            let cfg = run.train_config(TrainPhase::Siamese, set)?;
            let out = run.out()?;
            let ck = run.checkpoint()?;
            let corpus = run.corpus()?;
            let ck = finetune_siamese(&ck, &corpus, &cfg, |e, s| {
                println!("{}", epoch_log_line(e, s))
            })?;
            ck.save(out)?;
        }
        Cmd::Enroll => {
            let out = run.out()?;
            let ck = run.checkpoint()?;
            let (m, base) = run.manifest()?;
            let net = Network::new(ck.spec, ck.params)?;
            let fe = Frontend::<f32>::new();
            let mut models = Vec::new();
            for (class, utts) in m.utterances_by_class().iter().enumerate() {
                let embs = utts
                    .iter()
                    .map(|&i| embed_utterance(&net, &fe, &ingest(m.resolve(&base, i))?))
                    .collect::<verid::Result<Vec<_>>>()?;
                models.push(enroll_speaker(&m.speakers()[class], &embs)?);
            }
            write(out, models_to_text(&models))?;
            println!("enrolled {} speakers", models.len());
        }
        Cmd::Trials { genuine, impostor } => {
            let out = run.out()?;
            let (m, _) = run.manifest()?;
            let trials = generate_trials(&m, *genuine, *impostor, run.seed)?;
            write(out, trials.to_text())?;
            println!("wrote {} trials", trials.trials.len());
        }
        Cmd::Score {
            trials,
            models,
            root,
        } => {
            let out = run.out()?;
            let list = TrialList::parse(&read_text(trials)?)?;
            let root = root.clone().unwrap_or_else(|| base_dir(trials));
            let ck = run.checkpoint()?;
            let models: BTreeMap<String, SpeakerModel<f32>> = match models {
                Some(p) => parse_models::<f32>(&read_text(p)?)?
                    .into_iter()
                    .map(|m| (m.speaker_id.clone(), m))
                    .collect(),
                None => BTreeMap::new(),
            };
            let net = Network::new(ck.spec, ck.params)?;
            let fe = Frontend::<f32>::new();
            let mut cache: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            let mut embed = |p: &str| -> Outcome<Vec<f32>> {
                if let Some(e) = cache.get(p) {
                    return Ok(e.clone());
                }
                let e = embed_utterance(&net, &fe, &ingest(root.join(p))?)?;
                cache.insert(p.to_string(), e.clone());
                Ok(e)
            };
            let mut scores = Vec::with_capacity(list.trials.len());
            for t in &list.trials {
                let a = embed(&t.a)?;
                let s = match models.get(&t.b) {
                    Some(m) => cosine_score(m, &a)?,
                    None => cosine_similarity(&a, &embed(&t.b)?)?,
                };
                scores.push((t.genuine, s as f64));
            }
            write(out, scores_to_text(&scores))?;
            println!("scored {} trials", scores.len());
        }
        Cmd::Eer { scores, curve } => {
            let (g, i) = parse_scores(&read_text(scores)?)?;
            let report = compute_eer(&g, &i)?;
            if let Some(out) = &run.common.out {
                write(output(out)?, report.summary())?;
            }
            if let Some(c) = curve {
                write(output(c)?, report.curve_text())?;
            }
            print!("{}", report.summary());
        }
        Cmd::UbmTrain { components, iters } => {
            let out = run.out()?;
            let (m, base) = run.manifest()?;
            let fe = Frontend::<f64>::new();
            let parts = (0..m.entries.len())
                .map(|i| mfcc_frames(&fe, &m.resolve(&base, i)))
                .collect::<Outcome<Vec<_>>>()?;
            let frames = stack_frames(&parts)?;
            let fit = train_ubm(&frames, *components, *iters, run.seed)?;
            for (i, ll) in fit.ll_trace.iter().enumerate() {
                println!("iter {i} loglik {ll:.6}");
            }
            for (it, k) in &fit.reseeded {
                eprintln!("reseeded degenerate component {k} at iteration {it}");
            }
            fit.gmm.save(out)?;
        }
        Cmd::UbmAdapt { ubm, relevance } => {
            let ubm = DiagGmm::<f64>::load(input(ubm)?)?;
            let (m, base) = run.manifest()?;
            let dir = output_dir(required(&run.common.out, "out")?)?;
            let fe = Frontend::<f64>::new();
            for (class, utts) in m.utterances_by_class().iter().enumerate() {
                let parts = utts
                    .iter()
                    .map(|&i| mfcc_frames(&fe, &m.resolve(&base, i)))
                    .collect::<Outcome<Vec<_>>>()?;
                let spk = map_adapt(&ubm, &stack_frames(&parts)?, *relevance)?;
                spk.save(dir.join(model_file_name(&m.speakers()[class])?))?;
            }
            println!("adapted {} speaker models", m.n_speakers());
        }
        Cmd::UbmScore {
            trials,
            ubm,
            models,
            root,
            relevance,
        } => {
            let out = run.out()?;
            let list = TrialList::parse(&read_text(trials)?)?;
            let root = root.clone().unwrap_or_else(|| base_dir(trials));
            let ubm = DiagGmm::<f64>::load(input(ubm)?)?;
            let fe = Frontend::<f64>::new();
            let mut scores = Vec::with_capacity(list.trials.len());
            for t in &list.trials {
                let test = mfcc_frames(&fe, &root.join(&t.a))?;
                let model_path = match models {
                    Some(dir) => Some(dir.join(model_file_name(&t.b)?)),
                    None => None,
                };
                let spk = match model_path.filter(|p| p.is_file()) {
                    Some(p) => DiagGmm::<f64>::load(p)?,
                    None => map_adapt(&ubm, &mfcc_frames(&fe, &root.join(&t.b))?, *relevance)?,
                };
                scores.push((t.genuine, llr_score(&spk, &ubm, &test)?));
            }
            write(out, scores_to_text(&scores))?;
            println!("scored {} trials", scores.len());
        }
    }
    Ok(())
}

fn summary(cmd: &Cmd, run: &Run) -> String {
    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    let c = run.common;
    for (name, p) in [
        ("manifest", &c.manifest),
        ("checkpoint", &c.checkpoint),
        ("config", &c.config),
    ] {
        if let Some(p) = p {
            inputs.push((name, p.as_path()));
        }
    }
    match cmd {
        Cmd::Score { trials, models, .. } => {
            inputs.push(("trials", trials));
            if let Some(m) = models {
                inputs.push(("models", m));
            }
        }
        Cmd::Eer { scores, .. } => inputs.push(("scores", scores)),
        Cmd::UbmAdapt { ubm, .. } => inputs.push(("ubm", ubm)),
        Cmd::UbmScore { trials, ubm, .. } => {
            inputs.push(("trials", trials));
            inputs.push(("ubm", ubm));
        }
        _ => {}
    }
    let digests: Vec<String> = inputs
        .iter()
        .map(|(n, p)| format!("{n}={}", digest(p)))
        .collect();
    format!(
        "run verid-cli={} verid-core={VERSION} cmd={} seed={} inputs=[{}]",
        env!("CARGO_PKG_VERSION"),
        cmd.name(),
        run.seed,
        digests.join(",")
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let run = Run {
        common: &cli.common,
        seed: cli.common.seed.unwrap_or(1),
    };
    eprintln!("{}", summary(&cli.cmd, &run));
    match execute(&cli.cmd, &run) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
