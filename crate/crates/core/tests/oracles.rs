//! Library results against direct, loop-based re-derivations.

use std::f64::consts::PI;

use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgp_sid::bestrq::{self, MaskConfig, MaskPlan, QuantizerState, STACK};
use tgp_sid::classifier::{self, ClassifierParams};
use tgp_sid::encoder::HiddenStates;
use tgp_sid::frontend::{self, AudioWaveform, FrontendConfig, LogMelFrames, NormScope};
use tgp_sid::pooling::{self, SpeakerEmbedding, TgpParams};
use tgp_sid::tensor::Tensor;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x [rows, k] · w [k, cols] + b`
fn affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Vec<Vec<f64>> {
    let (rows, k, cols) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    (0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| (0..k).map(|i| x.at(&[r, i]) * w.at(&[i, c])).sum::<f64>() + b.map_or(0.0, |b| b.data()[c]))
                .collect()
        })
        .collect()
}

fn dense_tgp(h: &Tensor, p: &TgpParams) -> Vec<f64> {
    let (t, d) = (h.shape()[0], h.shape()[1]);
    let heads = p.heads;
    let dk = d / heads;
    let f = affine(h, &p.filter_weight, Some(&p.filter_bias));
    let v = affine(h, &p.value_weight, Some(&p.value_bias));
    // time mixing: m[t'][j] = Σ_t W_T[t'][t] f[t][j] + b_T[t']
    let m: Vec<Vec<f64>> = (0..t)
        .map(|a| {
            (0..d)
                .map(|j| (0..t).map(|b| p.time_weight.at(&[a, b]) * f[b][j]).sum::<f64>() + p.time_bias.data()[a])
                .collect()
        })
        .collect();
    let mut out = vec![0.0; d];
    for head in 0..heads {
        for r in 0..t {
            let seg = &m[r][head * dk..(head + 1) * dk];
            let mean = seg.iter().sum::<f64>() / dk as f64;
            let var = seg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / dk as f64;
            let logit: f64 = seg
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let n = (x - mean) / (var + 1e-5).sqrt();
                    let y = n * p.norm_gain.at(&[head, i]) + p.norm_bias.at(&[head, i]);
                    y * p.gate_weight.at(&[head, i])
                })
                .sum::<f64>()
                + p.gate_bias.data()[head];
            let gate = sigmoid(logit);
            for i in 0..dk {
                out[head * dk + i] += gate * v[r][head * dk + i];
            }
        }
    }
    out
}

#[test]
fn tgp_matches_dense_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for heads in [1, 2, 4] {
        let (t, d) = (9, 8);
        let mut p = TgpParams::init(d, heads, t, &mut rng).unwrap();
        p.time_weight = random(&mut rng, vec![t, t], 0.5);
        p.time_bias = random(&mut rng, vec![t], 0.5);
        p.norm_gain = random(&mut rng, vec![heads, d / heads], 1.5);
        p.norm_bias = random(&mut rng, vec![heads, d / heads], 0.5);
        p.gate_bias = random(&mut rng, vec![heads], 0.5);
        p.filter_bias = random(&mut rng, vec![d], 0.3);
        let h = random(&mut rng, vec![t, d], 1.0);
        let e = pooling::tgp_pool(&HiddenStates::new(h.clone(), 40.0), &p).unwrap();
        let want = dense_tgp(&h, &p);
        for (a, b) in e.data.iter().zip(&want) {
            assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-11);
        }
    }
}

#[test]
fn self_attention_matches_dense_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for heads in [1, 2] {
        let (t, d) = (6, 4);
        let dk = d / heads;
        let h = random(&mut rng, vec![t, d], 1.0);
        let w = random(&mut rng, vec![heads, dk], 1.0);
        let e = pooling::self_attention_pool(&HiddenStates::new(h.clone(), 40.0), &w, heads).unwrap();
        for head in 0..heads {
            let scores: Vec<f64> = (0..t)
                .map(|r| (0..dk).map(|i| h.at(&[r, head * dk + i]) * w.at(&[head, i])).sum())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for i in 0..dk {
                let want: f64 = (0..t).map(|r| scores[r].exp() / z * h.at(&[r, head * dk + i])).sum();
                assert_relative_eq!(e.data[head * dk + i], want, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn quantizer_matches_brute_force() {
    let n_mels = 6;
    let q = QuantizerState::with_codebook_size(3, n_mels, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 40;
    let frames = LogMelFrames::new(random(&mut rng, vec![n, n_mels], 2.0), 10.0);
    let labels = bestrq::quantize_targets(&frames, &q).unwrap();
    assert_eq!(labels.len(), n / STACK);
    let (proj, book) = (q.projection(), q.codebook());
    let dim = proj.shape()[1];
    for (g, &label) in labels.iter().enumerate() {
        let stacked: Vec<f64> = (0..STACK * n_mels).map(|k| frames.data.data()[g * STACK * n_mels + k]).collect();
        let mut y: Vec<f64> = (0..dim).map(|j| (0..stacked.len()).map(|i| stacked[i] * proj.at(&[i, j])).sum()).collect();
        let yn = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        y.iter_mut().for_each(|v| *v /= yn);
        // cosine ranking equals ℓ2 ranking between unit vectors
        let best = (0..book.shape()[0])
            .map(|k| {
                let c = book.row(k);
                let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                y.iter().zip(c).map(|(a, b)| a * b / cn).sum::<f64>()
            })
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, s)| if s > acc.1 { (k, s) } else { acc });
        assert_eq!(label, best.0, "group {g}");
    }
}

#[test]
fn target_fraction_matches_the_all_four_rule() {
    // A frame of 4 mel frames is a target exactly when each of them is masked.
    let cfg = MaskConfig { prob: 0.05, span: 20 };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut targets, mut masked) = (0.0, 0.0);
    let plans = 2000;
    for _ in 0..plans {
        let plan = bestrq::make_mask_plan(1500, &cfg, &mut rng).unwrap();
        let t = plan.target_positions();
        for (g, &is_target) in t.iter().enumerate() {
            assert_eq!(is_target, plan.masked[g * 4..g * 4 + 4].iter().all(|&m| m));
        }
        targets += t.iter().filter(|&&x| x).count() as f64 / t.len() as f64;
        masked += plan.masked_fraction();
    }
    let (targets, masked) = (targets / plans as f64, masked / plans as f64);
    assert!(targets < masked);
    assert!((0.55..0.65).contains(&targets), "{targets}");
}

#[test]
fn bestrq_loss_matches_hand_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (n, d, v) = (16, 3, 5);
    let hidden = random(&mut rng, vec![n / 4, d], 1.0);
    let head = random(&mut rng, vec![d, v], 1.0);
    let labels = vec![4, 0, 2, 1];
    // positions 0 and 2 fully masked, position 1 partly
    let plan = MaskPlan::from_spans(n, vec![(0, 6), (8, 4)]);
    let out = bestrq::bestrq_loss(&HiddenStates::new(hidden.clone(), 40.0), &head, &labels, &plan).unwrap();
    let logits = affine(&hidden, &head, None);
    let ce = |r: usize| {
        let z: f64 = logits[r].iter().map(|l| l.exp()).sum();
        z.ln() - logits[r][labels[r]]
    };
    assert_eq!(out.masked_positions, 2);
    assert_relative_eq!(out.loss, (ce(0) + ce(2)) / 2.0, epsilon = 1e-12);
}

fn classifier_params(rng: &mut ChaCha8Rng, d_in: usize, d: usize, n: usize) -> ClassifierParams {
    ClassifierParams {
        fc_weight: random(rng, vec![d_in, d], 1.0),
        fc_bias: random(rng, vec![d], 0.1),
        class_weights: random(rng, vec![n, d], 1.0),
        margin: 0.2,
        scale: 30.0,
    }
}

#[test]
fn aam_logits_match_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let p = classifier_params(&mut rng, 4, 4, 6);
    let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos: Vec<f64> = (0..6)
        .map(|k| {
            let w = p.class_weights.row(k);
            let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (xn * wn)
        })
        .collect();
    let plain = classifier::aam_logits(&x, &p, None).unwrap();
    for (l, c) in plain.iter().zip(&cos) {
        assert_relative_eq!(*l, 30.0 * c, epsilon = 1e-11);
    }
    let target = 3;
    let with_margin = classifier::aam_logits(&x, &p, Some(target)).unwrap();
    for (k, (l, c)) in with_margin.iter().zip(&cos).enumerate() {
        let want = if k == target {
            let theta = c.acos();
            if theta + 0.2 <= PI {
                30.0 * (theta + 0.2).cos()
            } else {
                30.0 * (c - 0.2 * 0.2f64.sin())
            }
        } else {
            30.0 * c
        };
        assert_relative_eq!(*l, want, epsilon = 1e-10);
    }
}

#[test]
fn classify_is_softmax_of_plain_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p = classifier_params(&mut rng, 5, 3, 4);
    let e = SpeakerEmbedding {
        data: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let (id, probs) = classifier::classify(&e, &p).unwrap();
    let x = classifier::project(&e, &p).unwrap();
    let want_x = affine(&Tensor::new(vec![1, 5], e.data.clone()), &p.fc_weight, Some(&p.fc_bias));
    for (a, b) in x.iter().zip(&want_x[0]) {
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }
    let logits = classifier::aam_logits(&x, &p, None).unwrap();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    for (pr, l) in probs.iter().zip(&logits) {
        assert_relative_eq!(*pr, l.exp() / z, epsilon = 1e-12);
    }
    assert_eq!(id, classifier::argmax(&logits));
}

fn hz_to_mel_natural(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

#[test]
fn log_mel_matches_naive_dft() {
    let sr = 16_000;
    let cfg = FrontendConfig {
        n_mels: 20,
        normalization: NormScope::None,
        ..FrontendConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let n: usize = 1200;
    let samples: Vec<f64> = (0..n).map(|i| 0.3 * (i as f64 * 0.07).sin() + rng.random_range(-0.05..0.05)).collect();
    let wave = AudioWaveform::new(samples.clone(), sr).unwrap();
    let got = frontend::log_mel(&wave, &cfg).unwrap();

    let (n_fft, hop) = (400usize, 160usize);
    let frames = n.div_ceil(hop);
    assert_eq!(got.num_frames(), frames);
    // HTK mel edges from the natural-log form of the scale
    let top = hz_to_mel_natural(8000.0);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| 700.0 * ((top * i as f64 / (cfg.n_mels + 1) as f64 / 1127.0).exp() - 1.0))
        .collect();
    let reflect = |i: isize| -> f64 {
        let j = if i < 0 { -i } else if i >= n as isize { 2 * (n as isize - 1) - i } else { i };
        samples[j as usize]
    };
    for t in 0..frames {
        let power: Vec<f64> = (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for m in 0..n_fft {
                    let w = 0.5 - 0.5 * (2.0 * PI * m as f64 / n_fft as f64).cos();
                    let s = reflect((t * hop + m) as isize - (n_fft / 2) as isize) * w;
                    let a = -2.0 * PI * (k * m) as f64 / n_fft as f64;
                    re += s * a.cos();
                    im += s * a.sin();
                }
                re * re + im * im
            })
            .collect();
        for mel in 0..cfg.n_mels {
            let (l, c, r) = (edges[mel], edges[mel + 1], edges[mel + 2]);
            let energy: f64 = power
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let f = k as f64 * sr as f64 / n_fft as f64;
                    let w = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    w * p
                })
                .sum();
            assert_relative_eq!(got.data.at(&[t, mel]), (energy + 1e-10).ln(), epsilon = 1e-8, max_relative = 1e-9);
        }
    }
}

#[test]
fn tone_peaks_in_its_filter() {
    let sr = 16_000;
    let cfg = FrontendConfig {
        normalization: NormScope::None,
        ..FrontendConfig::default()
    };
    let centers = frontend::mel_centers(cfg.n_mels, 0.0, 8000.0);
    for &mel in &[10usize, 40, 70] {
        let f = centers[mel];
        let wave = AudioWaveform::new((0..8000).map(|i| (2.0 * PI * f * i as f64 / sr as f64).sin()).collect(), sr).unwrap();
        let frames = frontend::log_mel(&wave, &cfg).unwrap();
        let row = frames.data.row(frames.num_frames() / 2);
        assert_eq!(classifier::argmax(row), mel, "tone at {f:.1} Hz");
    }
}
