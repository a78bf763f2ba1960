use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tgp_sid::bestrq::{self, MaskConfig};
use tgp_sid::classifier::{self, ClassifierParams};
use tgp_sid::encoder::HiddenStates;
use tgp_sid::frontend::{self, AudioWaveform, FrontendConfig, LogMelFrames, STD_FLOOR};
use tgp_sid::pooling::{self, PoolingKind, SpeakerEmbedding, TgpParams};
use tgp_sid::tensor::Tensor;
use tgp_sid::train::{lr_at, lr_at_time, AdamW, AdamWConfig, Checkpoint, ScheduleConfig};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d))
}

fn frames(t: usize, d: usize) -> impl Strategy<Value = Tensor> {
    tensor(vec![t, d])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frame_count_is_ceil_of_hops(samples in 160usize..20_000) {
        let cfg = FrontendConfig { n_mels: 20, ..FrontendConfig::default() };
        let wave = AudioWaveform::new(vec![0.01; samples], 16_000).unwrap();
        let mel = frontend::log_mel(&wave, &cfg).unwrap();
        prop_assert_eq!(mel.num_frames(), samples.div_ceil(160));
    }

    #[test]
    fn fix_length_hits_target_and_is_idempotent(
        samples in prop::collection::vec(-1.0f64..1.0, 1..4000),
        seconds in 0.01f64..0.3,
        offset in 0usize..5000,
    ) {
        let wave = AudioWaveform::new(samples, 8000).unwrap();
        let once = frontend::fix_length(&wave, seconds, offset).unwrap();
        prop_assert_eq!(once.len(), (seconds * 8000.0).round() as usize);
        let twice = frontend::fix_length(&once, seconds, offset).unwrap();
        prop_assert_eq!(once.samples(), twice.samples());
    }

    #[test]
    fn normalized_channels_are_standardized(data in frames(12, 5)) {
        let out = frontend::normalize(&LogMelFrames::new(data.clone(), 10.0));
        for c in 0..5 {
            let col: Vec<f64> = (0..12).map(|t| out.data.at(&[t, c])).collect();
            let raw: Vec<f64> = (0..12).map(|t| data.at(&[t, c])).collect();
            let raw_mean = raw.iter().sum::<f64>() / 12.0;
            let raw_std = (raw.iter().map(|x| (x - raw_mean).powi(2)).sum::<f64>() / 12.0).sqrt();
            let mean = col.iter().sum::<f64>() / 12.0;
            let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 12.0).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            if raw_std > STD_FLOOR {
                prop_assert!((std - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tgp_gates_lie_in_unit_interval(h in frames(6, 4), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = TgpParams::init(4, 2, 6, &mut rng).unwrap();
        let gates = pooling::tgp_gates(&HiddenStates::new(h, 40.0), &p).unwrap();
        prop_assert_eq!(gates.shape(), &[6, 2]);
        prop_assert!(gates.data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn zero_gate_tgp_is_half_the_value_sum(h in frames(5, 4), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = TgpParams::init(4, 2, 5, &mut rng).unwrap();
        p.gate_weight = Tensor::zeros(vec![2, 2]);
        p.gate_bias = Tensor::zeros(vec![2]);
        let e = pooling::tgp_pool(&HiddenStates::new(h.clone(), 40.0), &p).unwrap();
        for j in 0..4 {
            let want: f64 = (0..5)
                .map(|t| 0.5 * (0..4).map(|i| h.at(&[t, i]) * p.value_weight.at(&[i, j])).sum::<f64>())
                .sum();
            prop_assert!((e.data[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn tgp_with_identity_mixing_ignores_frame_order(h in frames(5, 4), seed in 0u64..1000, rot in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = TgpParams::init(4, 2, 5, &mut rng).unwrap();
        p.time_weight = Tensor::from_fn(vec![5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
        p.time_bias = Tensor::zeros(vec![5]);
        let rotated = Tensor::from_fn(vec![5, 4], |i| h.at(&[(i / 4 + rot) % 5, i % 4]));
        let a = pooling::tgp_pool(&HiddenStates::new(h, 40.0), &p).unwrap();
        let b = pooling::tgp_pool(&HiddenStates::new(rotated, 40.0), &p).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_head_tgp_equals_a_head_of_its_own(h in frames(4, 3), seed in 0u64..1000) {
        // one head over all of d is the dk = d case of the per-head gate
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = TgpParams::init(3, 1, 4, &mut rng).unwrap();
        let gates = pooling::tgp_gates(&HiddenStates::new(h.clone(), 40.0), &p).unwrap();
        let e = pooling::tgp_pool(&HiddenStates::new(h.clone(), 40.0), &p).unwrap();
        for j in 0..3 {
            let want: f64 = (0..4)
                .map(|t| {
                    let v = (0..3).map(|i| h.at(&[t, i]) * p.value_weight.at(&[i, j])).sum::<f64>() + p.value_bias.data()[j];
                    gates.at(&[t, 0]) * v
                })
                .sum();
            prop_assert!((e.data[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pooling_ignores_frame_order(h in frames(6, 3), rot in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rotated = Tensor::from_fn(vec![6, 3], |i| h.at(&[(i / 3 + rot) % 6, i % 3]));
        for kind in [PoolingKind::Mean, PoolingKind::MeanStd, PoolingKind::Max] {
            let a = pooling::statistical_pool(&HiddenStates::new(h.clone(), 40.0), kind, &mut rng).unwrap();
            let b = pooling::statistical_pool(&HiddenStates::new(rotated.clone(), 40.0), kind, &mut rng).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classification_ignores_projection_scale(
        x in prop::collection::vec(-1.0f64..1.0, 4),
        w in tensor(vec![5, 4]),
        alpha in 0.01f64..100.0,
    ) {
        prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 1e-4);
        prop_assume!(w.rows().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-4));
        let p = ClassifierParams {
            fc_weight: Tensor::from_fn(vec![4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }),
            fc_bias: Tensor::zeros(vec![4]),
            class_weights: w,
            margin: 0.2,
            scale: 30.0,
        };
        let scaled: Vec<f64> = x.iter().map(|v| v * alpha).collect();
        let a = classifier::aam_logits(&x, &p, None).unwrap();
        let b = classifier::aam_logits(&scaled, &p, None).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-9);
        }
        let (_, probs) = classifier::classify(&SpeakerEmbedding { data: x }, &p).unwrap();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn larger_margin_lowers_the_target_logit(
        x in prop::collection::vec(-1.0f64..1.0, 3),
        w in tensor(vec![4, 3]),
        target in 0usize..4,
        m1 in 0.0f64..0.7,
        dm in 0.01f64..0.8,
    ) {
        prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 1e-4);
        prop_assume!(w.rows().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-4));
        let mk = |m: f64| ClassifierParams {
            fc_weight: Tensor::zeros(vec![3, 3]),
            fc_bias: Tensor::zeros(vec![3]),
            class_weights: w.clone(),
            margin: m,
            scale: 30.0,
        };
        let m2 = (m1 + dm).min(1.5);
        let a = classifier::aam_logits(&x, &mk(m1), Some(target)).unwrap();
        let b = classifier::aam_logits(&x, &mk(m2), Some(target)).unwrap();
        prop_assert!(b[target] <= a[target] + 1e-12);
        for k in (0..4).filter(|&k| k != target) {
            prop_assert_eq!(a[k], b[k]);
        }
    }

    #[test]
    fn schedule_rises_then_falls_within_bounds(
        warmup in 1u64..500,
        extra in 1u64..5000,
        peak in 1e-6f64..1e-1,
        floor_frac in 0.0f64..1.0,
    ) {
        let cfg = ScheduleConfig { peak_lr: peak, warmup_steps: warmup, total_steps: warmup + extra, floor_lr: peak * floor_frac };
        let mut prev = 0.0;
        let step = ((warmup + extra) / 97).max(1);
        let mut s = 0;
        while s <= cfg.total_steps {
            let lr = lr_at(s, &cfg).unwrap();
            prop_assert!(lr >= 0.0 && lr <= peak * (1.0 + 1e-12));
            if s <= warmup { prop_assert!(lr >= prev) } else { prop_assert!(lr <= prev + 1e-18) }
            prev = lr;
            s += if s < warmup { 1 } else { step };
        }
        let w = warmup as f64;
        prop_assert!((lr_at_time(w - 1e-9, &cfg) - lr_at_time(w, &cfg)).abs() <= peak * 1e-9);
        prop_assert!((lr_at(cfg.total_steps, &cfg).unwrap() - cfg.floor_lr).abs() <= peak * 1e-12);
    }

    #[test]
    fn masking_keeps_unmasked_frames_and_labels_come_from_clean_input(
        data in frames(32, 4),
        seed in 0u64..1000,
    ) {
        let clean = LogMelFrames::new(data, 10.0);
        let q = bestrq::QuantizerState::with_codebook_size(seed, 4, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = bestrq::make_mask_plan(32, &MaskConfig { prob: 0.2, span: 6 }, &mut rng).unwrap();
        let before = bestrq::quantize_targets(&clean, &q).unwrap();
        let masked = bestrq::apply_mask(&clean, &plan, &mut rng).unwrap();
        for t in 0..32 {
            if !plan.masked[t] {
                prop_assert_eq!(masked.data.row(t), clean.data.row(t));
            } else {
                prop_assert!(masked.data.row(t) != clean.data.row(t));
            }
        }
        // targets come from the clean features, so masking cannot change them
        prop_assert_eq!(bestrq::quantize_targets(&clean, &q).unwrap(), before);
        prop_assert!(plan.num_masked() >= 6);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical(
        tensors in prop::collection::btree_map("[a-z]{1,6}(/[a-z.]{1,6})?", prop::collection::vec(-1e3f64..1e3, 0..20), 0..6),
        step in 0u64..1_000_000,
    ) {
        let mut ck = Checkpoint::new(serde_json::json!({ "step": step }));
        for (k, v) in tensors {
            let n = v.len();
            ck.tensors.insert(k, Tensor::new(vec![n], v));
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(&back.tensors, &ck.tensors);
    }

    #[test]
    fn adamw_zero_gradient_without_decay_is_identity(v in prop::collection::vec(-5.0f64..5.0, 1..10), lr in 1e-6f64..1.0) {
        let mut store = tgp_sid::params::ParamStore::new();
        let n = v.len();
        store.insert("w", Tensor::new(vec![n], v.clone()));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(vec![n]))]);
        opt.step(&mut store, &grads, lr).unwrap();
        prop_assert_eq!(store.get("w").unwrap().data(), &v[..]);
    }
}
