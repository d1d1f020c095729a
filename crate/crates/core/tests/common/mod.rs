#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use verid::nn::activation::{relu_backward, relu_forward};
use verid::nn::batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormParams, Mode};
use verid::nn::conv::{conv_backward, conv_forward, ConvParams};
use verid::nn::fc::{fc_backward, fc_forward, FcParams};
use verid::nn::loss::{contrastive_loss, softmax_xent, ContrastiveConfig};
use verid::nn::model::{ConvSpec, Head, ModelSpec, Network, ParamRole};
use verid::Tensor;

pub const H: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, scale).unwrap();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + H;
            let up = f(&probe);
            probe.data_mut()[i] = orig - H;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error over input, weight and bias gradients of a strided
/// convolution under the objective `Σ r ⊙ conv(x)`.
pub fn conv_check(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (b, c, oc) = (2, g.random_range(1..=3), g.random_range(1..=3));
    let (kh, kw) = (g.random_range(1..=3), g.random_range(1..=3));
    let stride = (g.random_range(1..=2), g.random_range(1..=2));
    let (hh, ww) = (kh + g.random_range(2..6), kw + g.random_range(2..6));
    let x = randn(&mut g, &[b, c, hh, ww], 1.0);
    let p = ConvParams {
        weight: randn(&mut g, &[oc, c, kh, kw], 0.5),
        bias: randn(&mut g, &[oc], 0.5),
        stride,
    };
    let (y, cache) = conv_forward(&x, &p).unwrap();
    let r = randn(&mut g, y.shape(), 1.0);
    let grads = conv_backward(&r, &cache, &p).unwrap();

    let gx = numeric_grad(&x, |xp| project(&conv_forward(xp, &p).unwrap().0, &r));
    let gw = numeric_grad(&p.weight, |w| {
        let q = ConvParams {
            weight: w.clone(),
            ..p.clone()
        };
        project(&conv_forward(&x, &q).unwrap().0, &r)
    });
    let gb = numeric_grad(&p.bias, |bb| {
        let q = ConvParams {
            bias: bb.clone(),
            ..p.clone()
        };
        project(&conv_forward(&x, &q).unwrap().0, &r)
    });
    rel_err(grads.input.data(), &gx)
        .max(rel_err(grads.weight.data(), &gw))
        .max(rel_err(grads.bias.data(), &gb))
}

/// Train-mode batch normalization, gradients of input, γ and β.
pub fn batchnorm_check(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (b, c) = (g.random_range(2..=4), g.random_range(1..=3));
    let x = randn(&mut g, &[b, c, 2, 3], 1.5);
    let mut p = BatchNormParams::<f64>::new(c);
    p.gamma = randn(&mut g, &[c], 1.0);
    p.beta = randn(&mut g, &[c], 1.0);
    let eval = |x: &Tensor<f64>, p: &BatchNormParams<f64>| {
        let mut q = p.clone();
        batchnorm_forward(x, &mut q, Mode::Train).unwrap()
    };
    let (y, cache) = eval(&x, &p);
    let r = randn(&mut g, y.shape(), 1.0);
    let grads = batchnorm_backward(&r, &cache, &p).unwrap();

    let gx = numeric_grad(&x, |xp| project(&eval(xp, &p).0, &r));
    let gg = numeric_grad(&p.gamma, |gm| {
        let q = BatchNormParams {
            gamma: gm.clone(),
            ..p.clone()
        };
        project(&eval(&x, &q).0, &r)
    });
    let gb = numeric_grad(&p.beta, |bt| {
        let q = BatchNormParams {
            beta: bt.clone(),
            ..p.clone()
        };
        project(&eval(&x, &q).0, &r)
    });
    rel_err(grads.input.data(), &gx)
        .max(rel_err(grads.gamma.data(), &gg))
        .max(rel_err(grads.beta.data(), &gb))
}

pub fn fc_check(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (b, i, o) = (
        g.random_range(1..=4),
        g.random_range(1..=6),
        g.random_range(1..=5),
    );
    let x = randn(&mut g, &[b, i], 1.0);
    let p = FcParams {
        weight: randn(&mut g, &[o, i], 0.7),
        bias: randn(&mut g, &[o], 0.7),
    };
    let r = randn(&mut g, &[b, o], 1.0);
    let grads = fc_backward(&r, &x, &p).unwrap();
    let gx = numeric_grad(&x, |xp| project(&fc_forward(xp, &p).unwrap(), &r));
    let gw = numeric_grad(&p.weight, |w| {
        let q = FcParams {
            weight: w.clone(),
            bias: p.bias.clone(),
        };
        project(&fc_forward(&x, &q).unwrap(), &r)
    });
    let gb = numeric_grad(&p.bias, |bb| {
        let q = FcParams {
            weight: p.weight.clone(),
            bias: bb.clone(),
        };
        project(&fc_forward(&x, &q).unwrap(), &r)
    });
    rel_err(grads.input.data(), &gx)
        .max(rel_err(grads.weight.data(), &gw))
        .max(rel_err(grads.bias.data(), &gb))
}

/// ReLU away from its kink.
pub fn relu_check(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut x = randn(&mut g, &[3, 7], 1.0);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    let r = randn(&mut g, &[3, 7], 1.0);
    let y = relu_forward(&x);
    let gx = relu_backward(&r, &y);
    let num = numeric_grad(&x, |xp| project(&relu_forward(xp), &r));
    rel_err(gx.data(), &num)
}

pub fn softmax_check(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (b, s) = (g.random_range(1..=5), g.random_range(2..=7));
    let logits = randn(&mut g, &[b, s], 2.0);
    let labels: Vec<usize> = (0..b).map(|_| g.random_range(0..s)).collect();
    let (_, grad) = softmax_xent(&logits, &labels).unwrap();
    let num = numeric_grad(&logits, |z| softmax_xent(z, &labels).unwrap().0);
    rel_err(grad.data(), &num)
}

/// Contrastive loss on pairs whose distances avoid `0` and the margin.
pub fn contrastive_check(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (n, d) = (6, g.random_range(2..=5));
    let cfg = ContrastiveConfig {
        margin: g.random_range(0.8..2.5),
        lambda: 0.0,
    };
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let (e1, e2) = loop {
        let e1 = randn(&mut g, &[n, d], 0.5);
        let e2 = randn(&mut g, &[n, d], 0.5);
        let ok = (0..n).all(|i| {
            let dist: f64 = e1
                .row(i)
                .iter()
                .zip(e2.row(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            dist > 0.05 && (dist - cfg.margin).abs() > 0.05
        });
        let some_active = (0..n).any(|i| {
            let dist: f64 = e1
                .row(i)
                .iter()
                .zip(e2.row(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            labels[i] == 0 && dist < cfg.margin
        });
        if ok && some_active {
            break (e1, e2);
        }
    };
    let out = contrastive_loss(&e1, &e2, &labels, &cfg).unwrap();
    let n1 = numeric_grad(&e1, |a| {
        contrastive_loss(a, &e2, &labels, &cfg).unwrap().loss
    });
    let n2 = numeric_grad(&e2, |b| {
        contrastive_loss(&e1, b, &labels, &cfg).unwrap().loss
    });
    rel_err(out.grad_e1.data(), &n1).max(rel_err(out.grad_e2.data(), &n2))
}

/// A tiny spec with the full layer stack.
pub fn tiny_spec() -> ModelSpec {
    let geometry = [(7, 2), (5, 1), (3, 1), (3, 1), (3, 1)];
    ModelSpec {
        input: [2, 27, 29],
        convs: [2, 3, 3, 2, 2]
            .iter()
            .zip(geometry)
            .map(|(&c, (k, s))| ConvSpec::new(c, k, s))
            .collect(),
        fc_hidden: 5,
        embedding_dim: 4,
        n_classes: 3,
    }
}

/// Smallest `|pre-activation|` over every ReLU of a training-mode pass,
/// recomputed layer by layer.
fn min_abs_preactivation(net: &Network<f64>, x: &Tensor<f64>) -> f64 {
    let p = &net.params;
    let mut h = x.clone();
    let mut closest = f64::INFINITY;
    let mut track = |t: &Tensor<f64>| {
        closest = t.data().iter().fold(closest, |m, v| m.min(v.abs()));
    };
    for (conv, bn) in p.convs.iter().zip(&p.bns) {
        let (y, _) = conv_forward(&h, conv).unwrap();
        let (z, _) = batchnorm_forward(&y, &mut bn.clone(), Mode::Train).unwrap();
        track(&z);
        h = relu_forward(&z);
    }
    track(&fc_forward(&h, &p.fc1).unwrap());
    closest
}

/// End-to-end: softmax loss through every layer of a training-mode forward
/// pass, on an instance whose ReLU inputs all keep clear of the hinge.
pub fn network_check(seed: u64) -> f64 {
    let spec = tiny_spec();
    let mut g = rng(seed);
    let (mut net, x) = loop {
        let mut net = Network::<f64>::init(spec.clone(), g.random()).unwrap();
        for bn in &mut net.params.bns {
            bn.gamma = randn(&mut g, bn.gamma.shape(), 1.0).map(|v| 1.0 + 0.3 * v);
            bn.beta = randn(&mut g, bn.beta.shape(), 0.3);
        }
        let x = randn(&mut g, &[3, 2, 27, 29], 1.0);
        if min_abs_preactivation(&net, &x) > 1e-3 {
            break (net, x);
        }
    };
    let labels = vec![0, 2, 1];
    let logits = net.forward(&x, Mode::Train, Head::Classifier).unwrap();
    let (_, dlogits) = softmax_xent(&logits, &labels).unwrap();
    let grads = net.backward(&dlogits).unwrap();

    let base = net.params.clone();
    let mut worst = 0.0f64;
    let layout = spec.tensor_layout().unwrap();
    for (t, slot) in layout.iter().enumerate() {
        // running statistics do not enter a training-mode forward pass
        if slot.role == ParamRole::Running {
            continue;
        }
        let probe = base.tensors()[t].clone();
        let num = numeric_grad(&probe, |v| {
            let mut n2 = Network::new(spec.clone(), base.clone()).unwrap();
            *n2.params.tensors_mut()[t] = v.clone();
            let out = n2.forward(&x, Mode::Train, Head::Classifier).unwrap();
            softmax_xent(&out, &labels).unwrap().0
        });
        let analytic = grads.tensors()[t].data();
        let e = if slot.name.starts_with("conv") && slot.name.ends_with(".bias") {
            // batch norm removes any per-channel shift, so the true gradient is zero
            let vanishes =
                analytic.iter().all(|a| a.abs() < 1e-12) && num.iter().all(|n| n.abs() < 1e-8);
            if vanishes {
                0.0
            } else {
                1.0
            }
        } else {
            rel_err(analytic, &num)
        };
        worst = worst.max(e);
    }
    worst
}

// ---- signal processing oracles ----

pub const SR: f64 = 16000.0;

/// Filter centre frequencies from the mel formula, computed independently of
/// the library.
pub fn oracle_centers(n: usize) -> Vec<f64> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(SR / 2.0);
    (0..n + 2)
        .map(|i| hz(top * i as f64 / (n + 1) as f64))
        .collect()
}

/// Continuous triangle response of filter `m` at frequency `f`.
pub fn oracle_triangle(edges: &[f64], m: usize, f: f64) -> f64 {
    let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
    if f <= lo || f >= hi {
        0.0
    } else if f <= mid {
        (f - lo) / (mid - lo)
    } else {
        (hi - f) / (hi - mid)
    }
}

pub fn tone(freq: f64, amp: f64, n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (amp * (std::f64::consts::TAU * freq * i as f64 / SR).sin()) as f32)
        .collect()
}

/// The ten test tones: a spread of filters, each probed at a point where its
/// own triangle dominates its neighbours.
pub fn test_tones() -> Vec<(f64, usize)> {
    let e = oracle_centers(40);
    [
        (5, 0.0),
        (9, 0.2),
        (13, -0.2),
        (17, 0.0),
        (21, 0.3),
        (25, -0.3),
        (29, 0.0),
        (33, 0.2),
        (36, -0.2),
        (39, 0.0),
    ]
    .iter()
    .map(|&(m, frac)| {
        let c = e[m + 1];
        let f = if frac >= 0.0 {
            c + frac * (e[m + 2] - c)
        } else {
            c + frac * (c - e[m])
        };
        // the oracle's choice, not the library's
        let best = (0..40)
            .max_by(|&a, &b| oracle_triangle(&e, a, f).total_cmp(&oracle_triangle(&e, b, f)))
            .unwrap();
        (f, best)
    })
    .collect()
}

/// Band with the largest mean log-mel energy for a 1 s tone at `freq`.
pub fn tone_argmax(freq: f64) -> usize {
    let fe = verid::dsp::Frontend::<f64>::new();
    let clip = verid::audio_io::AudioClip::new(tone(freq, 0.5, 16000), "tone");
    let lm = fe.log_mel_1s(&clip).unwrap();
    let (bands, frames) = lm.dims2().unwrap();
    let mean =
        |b: usize| lm.data()[b * frames..(b + 1) * frames].iter().sum::<f64>() / frames as f64;
    (0..bands)
        .max_by(|&a, &b| mean(a).total_cmp(&mean(b)))
        .unwrap()
}

/// Direct O(N²) DFT power of a zero-padded 512-point frame.
pub fn brute_power(frame: &[f64]) -> Vec<f64> {
    (0..257)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let a = -std::f64::consts::TAU * (k * n) as f64 / 512.0;
                re += x * a.cos();
                im += x * a.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// One-sided power folded back to the full-spectrum energy.
pub fn parseval_ratio(frame: &[f64], power: &[f64]) -> f64 {
    let time: f64 = frame.iter().map(|x| x * x).sum();
    let freq = power[0] + power[256] + 2.0 * power[1..256].iter().sum::<f64>();
    freq / (512.0 * time)
}

/// Regression deltas by explicit replicate-padding and a fixed 5-tap kernel.
pub fn oracle_deltas(row: &[f64]) -> Vec<f64> {
    let n = row.len();
    let mut padded = vec![row[0]; 2];
    padded.extend_from_slice(row);
    padded.extend([row[n - 1]; 2]);
    let kernel = [-2.0, -1.0, 0.0, 1.0, 2.0];
    (0..n)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * padded[t + j])
                .sum::<f64>()
                / 10.0
        })
        .collect()
}

// ---- EER oracle ----

/// Exhaustive sweep: every distinct score and `±∞` as a threshold, FAR and
/// FRR by direct counting, lowest threshold on ties of `|FAR − FRR|`.
pub fn brute_eer(genuine: &[f64], impostor: &[f64]) -> (f64, f64) {
    let mut cands: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    cands.push(f64::NEG_INFINITY);
    cands.push(f64::INFINITY);
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best: Option<(f64, f64, f64)> = None;
    for &th in &cands {
        let frr = genuine.iter().filter(|&&s| s < th).count() as f64 / genuine.len() as f64;
        let far = impostor.iter().filter(|&&s| s >= th).count() as f64 / impostor.len() as f64;
        let gap = (far - frr).abs();
        if best.is_none_or(|(b, _, _)| gap < b) {
            best = Some((gap, (far + frr) / 2.0, th));
        }
    }
    let (_, eer, th) = best.unwrap();
    (eer, th)
}

/// Random score lists with deliberate ties.
pub fn random_scores(g: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let ng = g.random_range(1..=500);
    let ni = g.random_range(1..=500);
    let shift = g.random_range(0.0..2.0);
    let coarse = g.random_bool(0.5);
    let mut draw = |n: usize, mu: f64| -> Vec<f64> {
        let normal = Normal::new(mu, 1.0).unwrap();
        (0..n)
            .map(|_| {
                let v: f64 = normal.sample(g);
                if coarse {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
            .collect()
    };
    let gen = draw(ng, shift);
    let imp = draw(ni, 0.0);
    (gen, imp)
}

// ---- GMM-UBM fixture ----

pub struct GmmFixtureRun {
    pub eer: f64,
    pub ll_trace: Vec<f64>,
}

/// Background speakers train the UBM, evaluation speakers are MAP-enrolled
/// and every test utterance is scored against every model.
pub fn gmm_fixture_run(seed: u64) -> GmmFixtureRun {
    use verid::gmm::{llr_score, map_adapt, train_ubm};
    use verid::synth::ClusterSpeakers;
    let (n_bg, n_eval, dim) = (10, 20, 40);
    let pop = ClusterSpeakers::new(n_bg + n_eval, dim, 0.35, seed);
    let mut g = rng(seed ^ 0xF00D);
    let bg: Vec<Tensor<f64>> = (0..n_bg).map(|s| pop.frames(s, 500, &mut g)).collect();
    let n: usize = bg.iter().map(|t| t.shape()[0]).sum();
    let ubm_frames = Tensor::from_vec(
        &[n, dim],
        bg.iter().flat_map(|t| t.data().to_vec()).collect(),
    )
    .unwrap();
    let fit = train_ubm(&ubm_frames, 8, 20, seed).unwrap();

    let models: Vec<_> = (n_bg..n_bg + n_eval)
        .map(|s| map_adapt(&fit.gmm, &pop.frames(s, 300, &mut g), 16.0).unwrap())
        .collect();
    let (mut gen, mut imp) = (Vec::new(), Vec::new());
    for s in n_bg..n_bg + n_eval {
        for _ in 0..2 {
            let test = pop.frames(s, 100, &mut g);
            for (m, model) in models.iter().enumerate() {
                let score = llr_score(model, &fit.gmm, &test).unwrap();
                if m + n_bg == s {
                    gen.push(score)
                } else {
                    imp.push(score)
                }
            }
        }
    }
    GmmFixtureRun {
        eer: verid::verification::compute_eer(&gen, &imp).unwrap().eer,
        ll_trace: fit.ll_trace,
    }
}

/// 1-D clusters at ±5 (σ 0.3, 500 frames each); recovered `(mean, weight)`
/// sorted by mean.
pub fn two_cluster_recovery(seed: u64) -> Vec<(f64, f64)> {
    let mut g = rng(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut data: Vec<f64> = (0..500).map(|_| -5.0 + noise.sample(&mut g)).collect();
    data.extend((0..500).map(|_| 5.0 + noise.sample(&mut g)));
    let frames = Tensor::from_vec(&[1000, 1], data).unwrap();
    let fit = verid::gmm::train_ubm(&frames, 2, 20, seed).unwrap();
    let mut out: Vec<(f64, f64)> = (0..2)
        .map(|k| (fit.gmm.means.data()[k], fit.gmm.weights[k]))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

// ---- shapes and loss identities ----

pub const FULL_CONV: [[usize; 3]; 5] = [
    [32, 17, 47],
    [64, 13, 43],
    [128, 11, 41],
    [256, 9, 39],
    [256, 7, 37],
];
pub const FULL_CLASSES: usize = 1251;

pub struct ForwardShapes {
    pub convs: Vec<[usize; 3]>,
    pub fc1: usize,
    pub embedding: usize,
    pub logits: usize,
}

/// Pushes one zero input through the default full-size network, layer by layer.
pub fn full_forward_shapes() -> ForwardShapes {
    use verid::nn::batchnorm::batchnorm_infer;
    use verid::nn::conv::conv_infer;
    use verid::nn::model::ModelParams;
    let spec = ModelSpec::full(FULL_CLASSES);
    let p = ModelParams::<f32>::zeros(&spec).unwrap();
    let mut h = Tensor::<f32>::zeros(&[1, 3, 40, 100]);
    let mut convs = Vec::new();
    for (conv, bn) in p.convs.iter().zip(&p.bns) {
        h = relu_forward(&batchnorm_infer(&conv_infer(&h, conv).unwrap(), bn).unwrap());
        convs.push([h.shape()[1], h.shape()[2], h.shape()[3]]);
    }
    let hidden = fc_forward(&h, &p.fc1).unwrap();
    let net = Network::new(spec, p).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 3, 40, 100]);
    ForwardShapes {
        convs,
        fc1: hidden.shape()[1],
        embedding: net.infer(&x, Head::Embedding).unwrap().shape()[1],
        logits: net.infer(&x, Head::Classifier).unwrap().shape()[1],
    }
}

/// `(value, expected)` for each hand-evaluated contrastive identity.
pub fn loss_identities() -> Vec<(&'static str, f64, f64)> {
    use verid::nn::loss::pair_term;
    vec![
        ("genuine at zero distance", pair_term(0.0, true, 1.0), 0.0),
        ("impostor at the margin", pair_term(1.0, false, 1.0), 0.0),
        (
            "impostor beyond the margin",
            pair_term(1.7, false, 1.0),
            0.0,
        ),
        ("genuine at 0.5", pair_term(0.5, true, 1.0), 0.125),
        ("impostor at 0.25", pair_term(0.25, false, 1.0), 0.28125),
    ]
}

// ---- end-to-end fixture run ----

pub struct DirectionalRun {
    pub train_accuracy: f64,
    pub pretrained: verid::verification::EerReport,
    pub finetuned: verid::verification::EerReport,
    pub pretrained_bytes: Vec<u8>,
    pub finetuned_bytes: Vec<u8>,
}

/// Scores every held-out utterance pair by cosine similarity of fc-2 embeddings.
pub fn held_out_eer(
    ck: &verid::nn::ModelCheckpoint<f32>,
    held_out: &verid::training::Corpus,
) -> verid::verification::EerReport {
    use verid::verification::{compute_eer, cosine_similarity, embed_utterance};
    let net = Network::new(ck.spec.clone(), ck.params.clone()).unwrap();
    let fe = verid::dsp::Frontend::<f32>::new();
    let emb: Vec<Vec<f32>> = held_out
        .clips
        .iter()
        .map(|c| embed_utterance(&net, &fe, c).unwrap())
        .collect();
    let (mut gen, mut imp) = (Vec::new(), Vec::new());
    for a in 0..emb.len() {
        for b in a + 1..emb.len() {
            let s = cosine_similarity(&emb[a], &emb[b]).unwrap() as f64;
            if held_out.labels[a] == held_out.labels[b] {
                gen.push(s)
            } else {
                imp.push(s)
            }
        }
    }
    compute_eer(&gen, &imp).unwrap()
}

pub const SIAMESE_EPOCHS: usize = 6;

/// Softmax pretraining with default settings, then hard-negative Siamese
/// fine-tuning; both checkpoints are scored on unseen speakers.
pub fn directional_run(seed: u64) -> DirectionalRun {
    use verid::synth::SynthSpec;
    use verid::training::{finetune_siamese, pretrain_softmax, PairStrategy, TrainConfig};
    let train = SynthSpec::training(seed).corpus();
    let held_out = SynthSpec::held_out(seed).corpus();
    let spec = ModelSpec::compact(train.n_classes());

    let mut cfg = TrainConfig::softmax();
    cfg.seed = seed;
    let pre = pretrain_softmax(&train, &spec, &cfg, |_, _| {}).unwrap();

    let mut cfg = TrainConfig::siamese();
    cfg.seed = seed;
    cfg.epochs = SIAMESE_EPOCHS;
    cfg.pair_strategy = PairStrategy::HardNegative;
    let post = finetune_siamese(&pre, &train, &cfg, |_, _| {}).unwrap();

    DirectionalRun {
        train_accuracy: pre.history.last().unwrap().accuracy,
        pretrained: held_out_eer(&pre, &held_out),
        finetuned: held_out_eer(&post, &held_out),
        pretrained_bytes: pre.to_bytes().unwrap(),
        finetuned_bytes: post.to_bytes().unwrap(),
    }
}
