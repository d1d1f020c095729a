//! `SVCK1` checkpoint files.
//!
//! Layout: the magic line `SVCK1`, a text header (model spec, training phase,
//! seed, epoch, per-epoch history, then one `tensor <name> <dims…>` line per
//! tensor), an `end` line, and the tensors as little-endian `f32` blobs in
//! header order.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::model::{ConvSpec, ModelParams, ModelSpec};
use crate::scalar::Scalar;

pub const MAGIC: &str = "SVCK1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Softmax,
    Siamese,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Softmax => "softmax",
            Phase::Siamese => "siamese",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "init" => Some(Phase::Init),
            "softmax" => Some(Phase::Softmax),
            "siamese" => Some(Phase::Siamese),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    /// Training accuracy (softmax phase) or the fraction of pairs on the
    /// correct side of the margin (Siamese phase).
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint<T> {
    pub spec: ModelSpec,
    pub params: ModelParams<T>,
    pub phase: Phase,
    pub seed: u64,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Scalar> ModelCheckpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check(&self.spec)?;
        let spec = &self.spec;
        let mut h = String::from(MAGIC);
        let [c, hh, w] = spec.input;
        writeln!(h, "input {c} {hh} {w}").unwrap();
        for cv in &spec.convs {
            writeln!(
                h,
                "conv {} {} {} {} {}",
                cv.out_channels, cv.kernel.0, cv.kernel.1, cv.stride.0, cv.stride.1
            )
            .unwrap();
        }
        writeln!(h, "fc_hidden {}", spec.fc_hidden).unwrap();
        writeln!(h, "embedding_dim {}", spec.embedding_dim).unwrap();
        writeln!(h, "n_classes {}", spec.n_classes).unwrap();
        writeln!(h, "phase {}", self.phase.as_str()).unwrap();
        writeln!(h, "seed {}", self.seed).unwrap();
        writeln!(h, "epoch {}", self.epoch).unwrap();
        for (i, e) in self.history.iter().enumerate() {
            writeln!(h, "history {} {:?} {:?}", i + 1, e.loss, e.accuracy).unwrap();
        }
        let layout = spec.tensor_layout()?;
        for slot in &layout {
            write!(h, "tensor {}", slot.name).unwrap();
            for d in &slot.shape {
                write!(h, " {d}").unwrap();
            }
            h.push('\n');
        }
        h.push_str("end\n");

        let mut out = h.into_bytes();
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .ok_or_else(|| fmt_err("missing SVCK1 magic"))?;
        let end_marker = b"\nend\n";
        let header_end = rest
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| fmt_err("header has no `end` line"))?;
        let header = std::str::from_utf8(&rest[..header_end + 1])
            .map_err(|_| fmt_err("header is not UTF-8"))?;
        let mut blob = &rest[header_end + end_marker.len()..];

        let mut input = None;
        let mut convs = Vec::new();
        let (mut fc_hidden, mut embedding_dim, mut n_classes) = (None, None, None);
        let (mut phase, mut seed, mut epoch) = (None, None, None);
        let mut history = Vec::new();
        let mut declared: Vec<(String, Vec<usize>)> = Vec::new();

        for line in header.lines() {
            let mut it = line.split_whitespace();
            let key = it.next().unwrap_or("");
            let vals: Vec<&str> = it.collect();
            let nums = || -> Result<Vec<usize>> {
                vals.iter()
                    .map(|v| {
                        v.parse()
                            .map_err(|_| fmt_err(format!("bad number in `{line}`")))
                    })
                    .collect()
            };
            match key {
                "input" => {
                    let n = nums()?;
                    if n.len() != 3 {
                        return Err(fmt_err("input needs 3 dims"));
                    }
                    input = Some([n[0], n[1], n[2]]);
                }
                "conv" => {
                    let n = nums()?;
                    if n.len() != 5 {
                        return Err(fmt_err("conv needs 5 fields"));
                    }
                    convs.push(ConvSpec {
                        out_channels: n[0],
                        kernel: (n[1], n[2]),
                        stride: (n[3], n[4]),
                    });
                }
                "fc_hidden" => fc_hidden = nums()?.first().copied(),
                "embedding_dim" => embedding_dim = nums()?.first().copied(),
                "n_classes" => n_classes = nums()?.first().copied(),
                "phase" => {
                    phase = Some(
                        vals.first()
                            .and_then(|s| Phase::parse(s))
                            .ok_or_else(|| fmt_err(format!("bad phase in `{line}`")))?,
                    )
                }
                "seed" => {
                    seed = Some(
                        vals.first()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| fmt_err("bad seed"))?,
                    )
                }
                "epoch" => epoch = nums()?.first().copied(),
                "history" => {
                    let parse = |i: usize| -> Result<f64> {
                        vals.get(i)
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| fmt_err(format!("bad history line `{line}`")))
                    };
                    history.push(EpochStats {
                        loss: parse(1)?,
                        accuracy: parse(2)?,
                    });
                }
                "tensor" => {
                    let name = vals.first().ok_or_else(|| fmt_err("tensor without name"))?;
                    let dims = vals[1..]
                        .iter()
                        .map(|v| {
                            v.parse()
                                .map_err(|_| fmt_err(format!("bad dims in `{line}`")))
                        })
                        .collect::<Result<Vec<usize>>>()?;
                    declared.push((name.to_string(), dims));
                }
                "" => {}
                other => return Err(fmt_err(format!("unknown header key `{other}`"))),
            }
        }

        let missing = |what: &str| fmt_err(format!("header lacks `{what}`"));
        let spec = ModelSpec {
            input: input.ok_or_else(|| missing("input"))?,
            convs,
            fc_hidden: fc_hidden.ok_or_else(|| missing("fc_hidden"))?,
            embedding_dim: embedding_dim.ok_or_else(|| missing("embedding_dim"))?,
            n_classes: n_classes.ok_or_else(|| missing("n_classes"))?,
        };
        let layout = spec.tensor_layout()?;
        if layout.len() != declared.len() {
            return Err(fmt_err(format!(
                "header declares {} tensors, spec implies {}",
                declared.len(),
                layout.len()
            )));
        }
        for (slot, (name, dims)) in layout.iter().zip(&declared) {
            if &slot.name != name || &slot.shape != dims {
                return Err(fmt_err(format!(
                    "tensor `{name}` {dims:?} does not match spec slot `{}` {:?}",
                    slot.name, slot.shape
                )));
            }
        }

        let mut params = ModelParams::<T>::zeros(&spec)?;
        for t in params.tensors_mut() {
            let n = t.len() * 4;
            if blob.len() < n {
                return Err(fmt_err("tensor data truncated"));
            }
            for (v, c) in t.data_mut().iter_mut().zip(blob[..n].chunks_exact(4)) {
                *v = T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
            blob = &blob[n..];
        }
        if !blob.is_empty() {
            return Err(fmt_err(format!("{} trailing bytes", blob.len())));
        }
        if params
            .bns
            .iter()
            .any(|b| b.running_var.data().iter().any(|&v| !(v > T::zero())))
        {
            return Err(fmt_err("running variance must be positive"));
        }
        if params.tensors().iter().any(|t| !t.all_finite()) {
            return Err(fmt_err("non-finite parameter"));
        }

        Ok(Self {
            spec,
            params,
            phase: phase.ok_or_else(|| missing("phase"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            epoch: epoch.ok_or_else(|| missing("epoch"))?,
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
