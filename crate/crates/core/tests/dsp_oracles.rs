mod common;

use common::*;
use rand::Rng;
use verid::audio_io::AudioClip;
use verid::dsp::{
    cmvn, dct_matrix, deltas, frame_full, frame_signal, log_mel, mel_filterbank, power_spectrum,
    Frontend, N_BINS,
};
use verid::Tensor;

#[test]
fn spectrum_matches_direct_dft() {
    let mut g = rng(11);
    for _ in 0..5 {
        let frame = randn(&mut g, &[1, 400], 0.3);
        let got = power_spectrum(&frame).unwrap();
        let want = brute_power(frame.data());
        let scale = want.iter().cloned().fold(0.0, f64::max);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9 * scale, "{a} vs {b}");
        }
    }
}

#[test]
fn parseval_holds() {
    let mut g = rng(12);
    for _ in 0..10 {
        let frame = randn(&mut g, &[1, 400], 1.0);
        let p = power_spectrum(&frame).unwrap();
        assert!((parseval_ratio(frame.data(), p.data()) - 1.0).abs() < 1e-12);
        // single precision, as used in training
        let f32_frame: Tensor<f32> = frame.cast();
        let p32: Vec<f64> = power_spectrum(&f32_frame)
            .unwrap()
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let back: Vec<f64> = f32_frame.data().iter().map(|&v| v as f64).collect();
        assert!((parseval_ratio(&back, &p32) - 1.0).abs() < 1e-6);
    }
}

#[test]
fn filterbank_matches_triangles() {
    let fb = mel_filterbank::<f64>(40);
    let e = oracle_centers(40);
    for m in 0..40 {
        for k in 0..N_BINS {
            let want = oracle_triangle(&e, m, k as f64 * SR / 512.0);
            assert!((fb.row(m)[k] - want).abs() < 1e-12, "filter {m} bin {k}");
        }
        // the peak bin straddles the centre frequency
        let row = fb.row(m);
        let peak = (0..N_BINS)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap();
        let centre_bin = e[m + 1] * 512.0 / SR;
        assert!(
            (peak as f64 - centre_bin).abs() < 1.0,
            "filter {m}: peak {peak} centre {centre_bin}"
        );
    }
}

#[test]
fn tones_land_in_their_filter() {
    for (f, want) in test_tones() {
        assert_eq!(tone_argmax(f), want, "tone at {f:.1} Hz");
    }
}

#[test]
fn deltas_match_direct_summation() {
    let mut g = rng(13);
    for len in [1, 2, 3, 5, 100] {
        let x = randn(&mut g, &[4, len], 2.0);
        let d = deltas(&x).unwrap();
        for r in 0..4 {
            for (a, b) in d.row(r).iter().zip(oracle_deltas(x.row(r))) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn feature_map_shape_for_any_crop() {
    let fe = Frontend::<f32>::new();
    let mut g = rng(14);
    for _ in 0..5 {
        let n = g.random_range(1..40000);
        let samples: Vec<f32> = (0..n).map(|_| g.random_range(-0.5..0.5)).collect();
        let clip = AudioClip::new(samples, "x");
        let off = g.random_range(0..n);
        let crop = verid::audio_io::crop_1s(&clip, off).unwrap();
        assert_eq!(fe.feature_map(&crop).unwrap().data.shape(), [3, 40, 100]);
    }
    assert!(frame_signal(&[0.0f64; 100]).is_err());
}

#[test]
fn mfcc_is_dct_of_log_mel() {
    let mut g = rng(15);
    let samples: Vec<f32> = (0..8000).map(|_| g.random_range(-0.3..0.3)).collect();
    let clip = AudioClip::new(samples, "x");
    let fe = Frontend::<f64>::new();
    let m = fe.mfcc(&clip).unwrap();
    assert_eq!(m.data.shape(), [1 + (8000 - 400) / 160, 40]);

    // oracle: orthonormal DCT-II by its defining sum
    let d = dct_matrix::<f64>(40);
    for k in 0..40 {
        for i in 0..40 {
            let s = if k == 0 {
                (1.0f64 / 40.0).sqrt()
            } else {
                (2.0f64 / 40.0).sqrt()
            };
            let want = s * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / 80.0).cos();
            assert!((d.row(k)[i] - want).abs() < 1e-15);
        }
    }
    let frames = frame_full(&clip.samples.iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap();
    let lm = log_mel(&power_spectrum(&frames).unwrap(), &mel_filterbank(40)).unwrap();
    let nf = lm.shape()[1];
    for t in [0, 7, nf - 1] {
        for k in 0..40 {
            let want: f64 = (0..40).map(|b| d.row(k)[b] * lm.data()[b * nf + t]).sum();
            assert!((m.data.row(t)[k] - want).abs() < 1e-9);
        }
    }

    let c = cmvn(&m);
    let (n, dim) = c.data.dims2().unwrap();
    for j in 0..dim {
        let col: Vec<f64> = (0..n).map(|t| c.data.row(t)[j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
}
