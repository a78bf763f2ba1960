//! BEST-RQ masked-prediction pre-training.
//!
//! Targets come from a frozen random-projection quantizer applied to clean
//! features: every group of [`STACK`] consecutive mel frames is flattened,
//! projected to [`CODE_DIM`] dimensions and assigned the nearest entry of a
//! random codebook (Euclidean distance between L2-normalized vectors). The
//! encoder sees the same features with random spans replaced by Gaussian
//! noise and is trained to predict the targets at fully masked positions.
//!
//! The quantizer lives outside the [`ParamStore`], so no optimizer can
//! touch it.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::classifier::argmax;
use crate::encoder::HiddenStates;
use crate::frontend::LogMelFrames;
use crate::nn;
use crate::params::{init, ParamStore, Session};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CODEBOOK_SIZE: usize = 8192;
pub const CODE_DIM: usize = 16;
/// Mel frames per target; matches the encoder's 4× subsampling.
pub const STACK: usize = 4;
pub const NOISE_STD: f64 = 0.1;
pub const HEAD_PREFIX: &str = "bestrq.head";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Per-frame probability of starting a span.
    pub prob: f64,
    /// Span length in mel frames (200 ms at a 10 ms hop).
    pub span: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { prob: 0.05, span: 20 }
    }
}

/// Frozen projection `[STACK · n_mels, CODE_DIM]` and codebook
/// `[codebook_size, CODE_DIM]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerState {
    projection: Tensor,
    codebook: Tensor,
    unit_codebook: Vec<f64>,
    seed: u64,
}

impl QuantizerState {
    pub fn init(seed: u64, n_mels: usize) -> Self {
        Self::with_codebook_size(seed, n_mels, CODEBOOK_SIZE)
    }

    pub fn with_codebook_size(seed: u64, n_mels: usize, codebook_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = STACK * n_mels;
        let projection = init::xavier_uniform(&mut rng, vec![fan_in, CODE_DIM], fan_in, CODE_DIM);
        let codebook = init::normal(&mut rng, vec![codebook_size, CODE_DIM], 1.0);
        Self::from_parts(projection, codebook, seed).expect("freshly drawn quantizer is well-formed")
    }

    /// Rebuilds a quantizer from stored tensors, e.g. a checkpoint.
    pub fn from_parts(projection: Tensor, codebook: Tensor, seed: u64) -> Result<Self> {
        if projection.ndim() != 2 || codebook.ndim() != 2 || projection.shape()[1] != codebook.shape()[1] {
            return Err(Error::Shape(format!(
                "quantizer projection {:?} vs codebook {:?}",
                projection.shape(),
                codebook.shape()
            )));
        }
        if projection.shape()[0] % STACK != 0 {
            return Err(Error::Shape(format!(
                "projection input width {} not a multiple of {STACK}",
                projection.shape()[0]
            )));
        }
        let dim = codebook.shape()[1];
        let mut unit_codebook = codebook.data().to_vec();
        unit_codebook.chunks_mut(dim).for_each(unit_normalize);
        Ok(Self {
            projection,
            codebook,
            unit_codebook,
            seed,
        })
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_mels(&self) -> usize {
        self.projection.shape()[0] / STACK
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.shape()[0]
    }

    /// Nearest codebook row to the normalized projection of one stacked
    /// `STACK · n_mels` vector; lowest index on ties.
    pub fn code_of(&self, stacked: &[f64]) -> usize {
        let (rows, dim) = (self.projection.shape()[0], self.projection.shape()[1]);
        debug_assert_eq!(stacked.len(), rows);
        let mut p = vec![0.0; dim];
        for (x, w) in stacked.iter().zip(self.projection.data().chunks(dim)) {
            for (pj, wj) in p.iter_mut().zip(w) {
                *pj += x * wj;
            }
        }
        unit_normalize(&mut p);
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.unit_codebook.chunks(dim).enumerate() {
            let dist: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best.0
    }
}

fn unit_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    /// `(start, length)` in mel frames.
    pub spans: Vec<(usize, usize)>,
}

impl MaskPlan {
    /// A plan masking nothing.
    pub fn empty(frames: usize) -> Self {
        Self {
            masked: vec![false; frames],
            spans: Vec::new(),
        }
    }

    pub fn from_spans(frames: usize, spans: Vec<(usize, usize)>) -> Self {
        let mut masked = vec![false; frames];
        for &(s, l) in &spans {
            masked[s..(s + l).min(frames)].iter_mut().for_each(|m| *m = true);
        }
        Self { masked, spans }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.num_masked() as f64 / self.len() as f64
    }

    /// Subsampled positions whose `STACK` source frames are all masked.
    pub fn target_positions(&self) -> Vec<bool> {
        self.masked.chunks_exact(STACK).map(|c| c.iter().all(|&m| m)).collect()
    }
}

/// Draws span starts independently per frame in `[0, frames − span]`; if none
/// is drawn, one span is forced at a uniform start.
pub fn make_mask_plan(frames: usize, cfg: &MaskConfig, rng: &mut impl Rng) -> Result<MaskPlan> {
    if cfg.span == 0 {
        return Err(Error::Config("mask span must be positive".into()));
    }
    if frames < cfg.span {
        return Err(Error::Shape(format!(
            "{frames} frames shorter than the mask span {}",
            cfg.span
        )));
    }
    if !(0.0..=1.0).contains(&cfg.prob) {
        return Err(Error::Config(format!("mask probability {} outside [0, 1]", cfg.prob)));
    }
    let last = frames - cfg.span;
    let mut spans: Vec<(usize, usize)> = (0..=last)
        .filter(|_| rng.random::<f64>() < cfg.prob)
        .map(|s| (s, cfg.span))
        .collect();
    if spans.is_empty() {
        spans.push((rng.random_range(0..=last), cfg.span));
    }
    Ok(MaskPlan::from_spans(frames, spans))
}

/// Replaces masked frames with i.i.d. `N(0, 0.1²)` noise.
pub fn apply_mask(frames: &LogMelFrames, plan: &MaskPlan, rng: &mut impl Rng) -> Result<LogMelFrames> {
    if plan.len() != frames.num_frames() {
        return Err(Error::Shape(format!(
            "mask plan over {} frames vs {} input frames",
            plan.len(),
            frames.num_frames()
        )));
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut data = frames.data.clone();
    for (t, _) in plan.masked.iter().enumerate().filter(|(_, &m)| m) {
        data.row_mut(t).iter_mut().for_each(|v| *v = noise.sample(rng));
    }
    Ok(LogMelFrames::new(data, frames.frame_hop_ms))
}

/// One codebook label per non-overlapping group of `STACK` frames.
pub fn quantize_targets(frames: &LogMelFrames, q: &QuantizerState) -> Result<Vec<usize>> {
    let n = frames.num_frames();
    if n % STACK != 0 {
        return Err(Error::Shape(format!("{n} frames not divisible by {STACK}")));
    }
    if frames.n_mels() != q.n_mels() {
        return Err(Error::Shape(format!(
            "{} mel channels vs quantizer built for {}",
            frames.n_mels(),
            q.n_mels()
        )));
    }
    Ok(frames
        .data
        .data()
        .chunks(STACK * frames.n_mels())
        .map(|group| q.code_of(group))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainBatchLoss {
    pub loss: f64,
    pub masked_positions: usize,
    pub accuracy: f64,
}

pub fn init_head(store: &mut ParamStore, rng: &mut ChaCha8Rng, hidden: usize, vocab: usize) {
    nn::init_linear(store, rng, HEAD_PREFIX, hidden, vocab, false);
}

/// Masked cross-entropy of the prediction head over a batch of encoder
/// outputs `[B, T', d]`, one label sequence and mask plan per element.
pub fn bestrq_loss_graph(
    sess: &Session,
    hidden: Var,
    labels: &[Vec<usize>],
    plans: &[MaskPlan],
) -> Result<(Var, PretrainBatchLoss)> {
    let g = sess.graph;
    let shape = g.shape(hidden);
    if shape.len() != 3 || shape[0] != labels.len() || labels.len() != plans.len() {
        return Err(Error::Shape(format!(
            "hidden {shape:?} vs {} label rows and {} plans",
            labels.len(),
            plans.len()
        )));
    }
    let (t, d) = (shape[1], shape[2]);
    let mut idx = Vec::new();
    let mut targets = Vec::new();
    for (i, (lab, plan)) in labels.iter().zip(plans).enumerate() {
        let positions = plan.target_positions();
        if lab.len() != t || positions.len() != t {
            return Err(Error::Shape(format!(
                "batch element {i}: {} labels and {} mask positions vs {t} hidden frames",
                lab.len(),
                positions.len()
            )));
        }
        for (p, _) in positions.iter().enumerate().filter(|(_, &m)| m) {
            idx.extend((0..d).map(|c| (i * t + p) * d + c));
            targets.push(lab[p]);
        }
    }
    if targets.is_empty() {
        return Err(Error::Empty("no fully masked target positions in the batch".into()));
    }
    let m = targets.len();
    let rows = g.gather(hidden, Rc::new(idx), vec![m, d]);
    let logits = nn::linear(sess, rows, HEAD_PREFIX)?;
    let correct = {
        let lv = g.value_ref(logits);
        let classes = lv.shape()[1];
        lv.data()
            .chunks(classes)
            .zip(&targets)
            .filter(|(row, &y)| argmax(row) == y)
            .count()
    };
    let loss = nn::cross_entropy(g, logits, &targets)?;
    let stats = PretrainBatchLoss {
        loss: g.value_ref(loss).item(),
        masked_positions: m,
        accuracy: correct as f64 / m as f64,
    };
    Ok((loss, stats))
}

/// Single-utterance loss for given encoder output and head weights `[d, V]`.
pub fn bestrq_loss(
    hidden: &HiddenStates,
    head_weights: &Tensor,
    labels: &[usize],
    plan: &MaskPlan,
) -> Result<PretrainBatchLoss> {
    let mut store = ParamStore::new();
    store.insert(format!("{HEAD_PREFIX}.w"), head_weights.clone());
    let g = crate::autograd::Graph::no_grad();
    let sess = Session::eval(&g, &store, ChaCha8Rng::seed_from_u64(0));
    let (n, d) = (hidden.num_frames(), hidden.dim());
    let h = g.constant(hidden.data.clone().reshape(vec![1, n, d]));
    let (_, stats) = bestrq_loss_graph(&sess, h, &[labels.to_vec()], std::slice::from_ref(plan))?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn quantizer_is_seeded() {
        let a = QuantizerState::init(3, 80);
        let b = QuantizerState::init(3, 80);
        assert_eq!(a, b);
        assert_ne!(a, QuantizerState::init(4, 80));
        assert_eq!(a.projection().shape(), &[320, 16]);
        assert_eq!(a.codebook().shape(), &[8192, 16]);
    }

    #[test]
    fn projection_within_xavier_bound() {
        let q = QuantizerState::init(0, 80);
        let bound = (6.0f64 / 336.0).sqrt();
        assert!(q.projection().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn codebook_mean_near_zero() {
        let q = QuantizerState::init(0, 80);
        let mean = q.codebook().sum() / q.codebook().len() as f64;
        assert!(mean.abs() < 0.05, "{mean}");
    }

    #[test]
    fn zero_probability_forces_one_span() {
        let cfg = MaskConfig { prob: 0.0, span: 20 };
        let plan = make_mask_plan(100, &cfg, &mut rng(1)).unwrap();
        assert_eq!(plan.spans.len(), 1);
        assert_eq!(plan.num_masked(), 20);
    }

    #[test]
    fn unit_probability_masks_everything() {
        let cfg = MaskConfig { prob: 1.0, span: 20 };
        let plan = make_mask_plan(40, &cfg, &mut rng(1)).unwrap();
        assert!(plan.masked.iter().all(|&m| m));
    }

    #[test]
    fn short_input_rejected() {
        assert!(make_mask_plan(19, &MaskConfig::default(), &mut rng(1)).is_err());
    }

    #[test]
    fn empty_plan_is_identity() {
        let frames = LogMelFrames::new(Tensor::from_fn(vec![8, 3], |i| i as f64), 10.0);
        let out = apply_mask(&frames, &MaskPlan::empty(8), &mut rng(0)).unwrap();
        assert_eq!(out, frames);
    }

    #[test]
    fn mask_length_mismatch() {
        let frames = LogMelFrames::new(Tensor::zeros(vec![8, 3]), 10.0);
        assert!(apply_mask(&frames, &MaskPlan::empty(9), &mut rng(0)).is_err());
    }

    #[test]
    fn toy_codebook_nearest() {
        let mut cb = Tensor::zeros(vec![2, 16]);
        cb.set(&[0, 0], 1.0);
        cb.set(&[1, 1], 1.0);
        let proj = Tensor::from_fn(vec![4, 16], |i| if i == 0 { 1.0 } else { 0.0 });
        let q = QuantizerState::from_parts(proj, cb, 0).unwrap();
        assert_eq!(q.code_of(&[2.0, 0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn frames_not_divisible_by_stack() {
        let q = QuantizerState::with_codebook_size(0, 2, 8);
        let frames = LogMelFrames::new(Tensor::zeros(vec![6, 2]), 10.0);
        assert!(quantize_targets(&frames, &q).is_err());
    }

    #[test]
    fn uniform_logits_loss() {
        let hidden = HiddenStates::new(Tensor::ones(vec![5, 3]), 40.0);
        let head = Tensor::zeros(vec![3, CODEBOOK_SIZE]);
        let plan = MaskPlan::from_spans(20, vec![(0, 20)]);
        let stats = bestrq_loss(&hidden, &head, &[1, 2, 3, 4, 5], &plan).unwrap();
        assert!((stats.loss - (CODEBOOK_SIZE as f64).ln()).abs() < 1e-9);
        assert_eq!(stats.masked_positions, 5);
    }

    #[test]
    fn partially_masked_groups_excluded() {
        let plan = MaskPlan::from_spans(12, vec![(2, 6)]);
        assert_eq!(plan.target_positions(), vec![false, true, false]);
    }

    #[test]
    fn no_masked_positions_is_an_error() {
        let hidden = HiddenStates::new(Tensor::ones(vec![2, 3]), 40.0);
        let head = Tensor::zeros(vec![3, 4]);
        let plan = MaskPlan::from_spans(8, vec![(1, 2)]);
        assert!(matches!(bestrq_loss(&hidden, &head, &[0, 1], &plan), Err(Error::Empty(_))));
    }
}
