//! The verification CNN: five valid convolutions (each followed by batch
//! normalization and ReLU, no pooling), fc-1 with ReLU, the fc-2 embedding
//! and the fc-3 speaker classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::activation::{relu_backward, relu_forward};
use crate::nn::batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_infer, BatchNormCache, BatchNormParams, Mode,
};
use crate::nn::conv::{
    conv_backward, conv_forward, conv_infer, conv_output_size, ConvCache, ConvParams,
};
use crate::nn::fc::{fc_backward, fc_forward, FcParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl ConvSpec {
    pub const fn new(out_channels: usize, k: usize, s: usize) -> Self {
        Self {
            out_channels,
            kernel: (k, k),
            stride: (s, s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// `(channels, mel bands, frames)` of one input.
    pub input: [usize; 3],
    pub convs: Vec<ConvSpec>,
    /// Width of fc-1.
    pub fc_hidden: usize,
    /// Width of fc-2, the embedding.
    pub embedding_dim: usize,
    /// Width of fc-3, one logit per training speaker.
    pub n_classes: usize,
}

/// Kernel/stride geometry shared by every preset: 7×7/2, 5×5, then three 3×3.
const GEOMETRY: [(usize, usize); 5] = [(7, 2), (5, 1), (3, 1), (3, 1), (3, 1)];

impl ModelSpec {
    /// The full-size network: 32/64/128/256/256 filters, fc widths 1024 and 256.
    pub fn full(n_classes: usize) -> Self {
        Self::with_widths([32, 64, 128, 256, 256], 1024, 256, n_classes)
    }

    /// Same geometry with narrow layers, sized for single-core CPU training on
    /// the synthetic fixture.
    pub fn compact(n_classes: usize) -> Self {
        Self::with_widths([8, 16, 16, 32, 32], 128, 64, n_classes)
    }

    pub fn with_widths(
        filters: [usize; 5],
        fc_hidden: usize,
        embedding_dim: usize,
        n_classes: usize,
    ) -> Self {
        Self {
            input: [3, 40, 100],
            convs: filters
                .iter()
                .zip(GEOMETRY)
                .map(|(&f, (k, s))| ConvSpec::new(f, k, s))
                .collect(),
            fc_hidden,
            embedding_dim,
            n_classes,
        }
    }

    /// `(C, H, W)` after each convolution.
    pub fn conv_output_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let [_, mut h, mut w] = self.input;
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            let (oh, ow) = conv_output_size((h, w), c.kernel, c.stride).ok_or_else(|| {
                Error::SpecMismatch(format!("conv-{} kernel does not fit {h}x{w}", i + 1))
            })?;
            h = oh;
            w = ow;
            out.push([c.out_channels, h, w]);
        }
        Ok(out)
    }

    /// Flattened width entering fc-1.
    pub fn flat_dim(&self) -> Result<usize> {
        let shapes = self.conv_output_shapes()?;
        Ok(shapes
            .last()
            .map(|s| s.iter().product())
            .unwrap_or_else(|| self.input.iter().product()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.is_empty() {
            return Err(Error::SpecMismatch("no convolution layers".into()));
        }
        if self.input.contains(&0)
            || self.fc_hidden == 0
            || self.embedding_dim == 0
            || self.n_classes == 0
            || self.convs.iter().any(|c| c.out_channels == 0)
        {
            return Err(Error::SpecMismatch("all widths must be positive".into()));
        }
        self.flat_dim().map(|_| ())
    }

    /// Name, shape and role of every stored tensor, in serialization order.
    pub fn tensor_layout(&self) -> Result<Vec<TensorSlot>> {
        self.validate()?;
        let mut slots = Vec::new();
        let mut in_ch = self.input[0];
        for (i, c) in self.convs.iter().enumerate() {
            let n = i + 1;
            let oc = c.out_channels;
            slots.push(TensorSlot::new(
                format!("conv{n}.weight"),
                vec![oc, in_ch, c.kernel.0, c.kernel.1],
                ParamRole::Weight,
            ));
            slots.push(TensorSlot::new(
                format!("conv{n}.bias"),
                vec![oc],
                ParamRole::Bias,
            ));
            slots.push(TensorSlot::new(
                format!("bn{n}.gamma"),
                vec![oc],
                ParamRole::Affine,
            ));
            slots.push(TensorSlot::new(
                format!("bn{n}.beta"),
                vec![oc],
                ParamRole::Affine,
            ));
            slots.push(TensorSlot::new(
                format!("bn{n}.running_mean"),
                vec![oc],
                ParamRole::Running,
            ));
            slots.push(TensorSlot::new(
                format!("bn{n}.running_var"),
                vec![oc],
                ParamRole::Running,
            ));
            in_ch = oc;
        }
        let dims = [
            (self.fc_hidden, self.flat_dim()?),
            (self.embedding_dim, self.fc_hidden),
            (self.n_classes, self.embedding_dim),
        ];
        for (i, (out, inp)) in dims.into_iter().enumerate() {
            let n = i + 1;
            slots.push(TensorSlot::new(
                format!("fc{n}.weight"),
                vec![out, inp],
                ParamRole::Weight,
            ));
            slots.push(TensorSlot::new(
                format!("fc{n}.bias"),
                vec![out],
                ParamRole::Bias,
            ));
        }
        Ok(slots)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Conv/fc weights; carry the squared-norm penalty.
    Weight,
    Bias,
    /// Batch-norm gamma and beta.
    Affine,
    /// Batch-norm running statistics; not trained by gradient.
    Running,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl TensorSlot {
    fn new(name: String, shape: Vec<usize>, role: ParamRole) -> Self {
        Self { name, shape, role }
    }

    /// True for the classifier head (fc-3), which the Siamese phase leaves alone.
    pub fn is_classifier_head(&self) -> bool {
        self.name.starts_with("fc3.")
    }
}

/// All network tensors. Gradients use the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub convs: Vec<ConvParams<T>>,
    pub bns: Vec<BatchNormParams<T>>,
    pub fc1: FcParams<T>,
    pub fc2: FcParams<T>,
    pub fc3: FcParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero weights with identity batch-norm, matching `spec`.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut in_ch = spec.input[0];
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for c in &spec.convs {
            convs.push(ConvParams::zeros(c.out_channels, in_ch, c.kernel, c.stride));
            bns.push(BatchNormParams::new(c.out_channels));
            in_ch = c.out_channels;
        }
        Ok(Self {
            convs,
            bns,
            fc1: FcParams::zeros(spec.fc_hidden, spec.flat_dim()?),
            fc2: FcParams::zeros(spec.embedding_dim, spec.fc_hidden),
            fc3: FcParams::zeros(spec.n_classes, spec.embedding_dim),
        })
    }

    /// He-normal weights (`std = √(2 / fan_in)`), zero biases, identity batch-norm.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = spec.tensor_layout()?;
        for (slot, t) in layout.iter().zip(p.tensors_mut()) {
            if slot.role != ParamRole::Weight {
                continue;
            }
            let fan_in: usize = slot.shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in t.data_mut() {
                *v = T::of(normal.sample(&mut rng));
            }
        }
        Ok(p)
    }

    /// Tensors in [`ModelSpec::tensor_layout`] order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for (c, b) in self.convs.iter().zip(&self.bns) {
            out.extend([
                &c.weight,
                &c.bias,
                &b.gamma,
                &b.beta,
                &b.running_mean,
                &b.running_var,
            ]);
        }
        for f in [&self.fc1, &self.fc2, &self.fc3] {
            out.extend([&f.weight, &f.bias]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for (c, b) in self.convs.iter_mut().zip(self.bns.iter_mut()) {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
            out.push(&mut b.running_mean);
            out.push(&mut b.running_var);
        }
        for f in [&mut self.fc1, &mut self.fc2, &mut self.fc3] {
            out.push(&mut f.weight);
            out.push(&mut f.bias);
        }
        out
    }

    /// Checks every tensor shape against `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.tensor_layout()?;
        let tensors = self.tensors();
        if layout.len() != tensors.len() {
            return Err(Error::SpecMismatch(format!(
                "spec has {} tensors, parameters have {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (slot, t) in layout.iter().zip(tensors) {
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::SpecMismatch(format!(
                    "{} is {:?}, spec needs {:?}",
                    slot.name,
                    t.shape(),
                    slot.shape
                )));
            }
        }
        if self
            .convs
            .iter()
            .zip(&spec.convs)
            .any(|(p, c)| p.stride != c.stride)
        {
            return Err(Error::SpecMismatch("conv strides differ from spec".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                    stride: c.stride,
                })
                .collect(),
            bns: self
                .bns
                .iter()
                .map(|b| BatchNormParams {
                    gamma: b.gamma.cast(),
                    beta: b.beta.cast(),
                    running_mean: b.running_mean.cast(),
                    running_var: b.running_var.cast(),
                })
                .collect(),
            fc1: cast_fc(&self.fc1),
            fc2: cast_fc(&self.fc2),
            fc3: cast_fc(&self.fc3),
        }
    }

    /// `Σ‖W‖²` over conv and fc weights, optionally skipping fc-3.
    pub fn weight_sq_norm(&self, include_head: bool) -> T {
        let mut s: T = self.convs.iter().map(|c| c.weight.sq_norm()).sum();
        s += self.fc1.weight.sq_norm() + self.fc2.weight.sq_norm();
        if include_head {
            s += self.fc3.weight.sq_norm();
        }
        s
    }
}

fn cast_fc<T: Scalar, U: Scalar>(f: &FcParams<T>) -> FcParams<U> {
    FcParams {
        weight: f.weight.cast(),
        bias: f.bias.cast(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// fc-3 logits.
    Classifier,
    /// fc-2 output, no activation.
    Embedding,
}

struct ConvStage<T> {
    conv: ConvCache<T>,
    bn: BatchNormCache<T>,
    out: Tensor<T>,
}

/// Activations retained by a training forward pass.
struct Trace<T> {
    head: Head,
    stages: Vec<ConvStage<T>>,
    hidden: Tensor<T>,
    embedding: Tensor<T>,
}

/// Network parameters plus the trace of the last training forward pass.
///
/// Both Siamese branches are this one object: the pair members are pushed
/// through the same forward pass, so they necessarily share weights.
pub struct Network<T: Scalar> {
    pub spec: ModelSpec,
    pub params: ModelParams<T>,
    trace: Option<Trace<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: ModelSpec, params: ModelParams<T>) -> Result<Self> {
        params.check(&spec)?;
        Ok(Self {
            spec,
            params,
            trace: None,
        })
    }

    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&spec, seed)?;
        Self::new(spec, params)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let (b, c, h, w) = x.dims4()?;
        if [c, h, w] != self.spec.input {
            return Err(Error::SpecMismatch(format!(
                "input {:?} does not match spec {:?}",
                [c, h, w],
                self.spec.input
            )));
        }
        Ok(b)
    }

    /// Eval-mode forward pass; reads parameters only.
    pub fn infer(&self, x: &Tensor<T>, head: Head) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let p = &self.params;
        let mut h = x.clone();
        for (conv, bn) in p.convs.iter().zip(&p.bns) {
            h = relu_forward(&batchnorm_infer(&conv_infer(&h, conv)?, bn)?);
        }
        let hidden = relu_forward(&fc_forward(&h, &p.fc1)?);
        let emb = fc_forward(&hidden, &p.fc2)?;
        match head {
            Head::Embedding => Ok(emb),
            Head::Classifier => fc_forward(&emb, &p.fc3),
        }
    }

    /// Forward pass in the given mode. Train mode uses batch statistics,
    /// updates running statistics and records what [`Network::backward`] needs.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, head: Head) -> Result<Tensor<T>> {
        if mode == Mode::Eval {
            self.trace = None;
            return self.infer(x, head);
        }
        self.check_input(x)?;
        let p = &mut self.params;
        let mut stages = Vec::with_capacity(p.convs.len());
        let mut h = x.clone();
        for (conv, bn) in p.convs.iter().zip(p.bns.iter_mut()) {
            let (y, conv_cache) = conv_forward(&h, conv)?;
            let (z, bn_cache) = batchnorm_forward(&y, bn, Mode::Train)?;
            let out = relu_forward(&z);
            h = out.clone();
            stages.push(ConvStage {
                conv: conv_cache,
                bn: bn_cache,
                out,
            });
        }
        let hidden = relu_forward(&fc_forward(&h, &p.fc1)?);
        let embedding = fc_forward(&hidden, &p.fc2)?;
        let result = match head {
            Head::Embedding => embedding.clone(),
            Head::Classifier => fc_forward(&embedding, &p.fc3)?,
        };
        self.trace = Some(Trace {
            head,
            stages,
            hidden,
            embedding,
        });
        Ok(result)
    }

    /// Gradients of all parameters given the gradient at the head output of
    /// the last training forward pass. Running-statistic slots are zero.
    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<ModelParams<T>> {
        let trace = self.trace.as_ref().ok_or(Error::MissingCache)?;
        let p = &self.params;
        let mut grads = ModelParams::zeros(&self.spec)?;

        let mut g = grad_out.clone();
        if trace.head == Head::Classifier {
            let g3 = fc_backward(&g, &trace.embedding, &p.fc3)?;
            grads.fc3.weight = g3.weight;
            grads.fc3.bias = g3.bias;
            g = g3.input;
        } else if g.shape() != trace.embedding.shape() {
            return Err(Error::ShapeMismatch(format!(
                "embedding grad {:?} vs output {:?}",
                g.shape(),
                trace.embedding.shape()
            )));
        }

        let g2 = fc_backward(&g, &trace.hidden, &p.fc2)?;
        grads.fc2.weight = g2.weight;
        grads.fc2.bias = g2.bias;
        let g = relu_backward(&g2.input, &trace.hidden);

        let flat = &trace
            .stages
            .last()
            .ok_or_else(|| Error::SpecMismatch("no conv stages".into()))?
            .out;
        let g1 = fc_backward(&g, flat, &p.fc1)?;
        grads.fc1.weight = g1.weight;
        grads.fc1.bias = g1.bias;
        let mut g = g1.input;

        for (i, stage) in trace.stages.iter().enumerate().rev() {
            let gz = relu_backward(&g, &stage.out);
            let gb = batchnorm_backward(&gz, &stage.bn, &p.bns[i])?;
            grads.bns[i].gamma = gb.gamma;
            grads.bns[i].beta = gb.beta;
            grads.bns[i].running_var.fill(T::zero());
            let gc = conv_backward(&gb.input, &stage.conv, &p.convs[i])?;
            grads.convs[i].weight = gc.weight;
            grads.convs[i].bias = gc.bias;
            g = gc.input;
        }
        Ok(grads)
    }

    pub fn clear_trace(&mut self) {
        self.trace = None;
    }
}
