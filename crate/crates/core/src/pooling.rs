//! Pooling layers that collapse `[B, T, d]` hidden states into one embedding
//! per utterance.
//!
//! # Temporal Gate Pooling
//!
//! For hidden states `H ∈ R^{T×d}` and `h` heads of width `dk = d / h`:
//!
//! ```text
//! F  = H·W_F + b_F                  V = H·W_V + b_V          (pointwise)
//! F'[t] = Σ_s W_T[t, s]·F[s] + b_T[t]                        (timewise, W_T ∈ R^{T×T}, shared by heads)
//! G_k = sigmoid(LayerNorm(F'_k)·W_G^k + b_G^k) ∈ R^{T×1}     (per head k, norm over the head's dk channels)
//! E_k = Σ_t V_k[t] · G_k[t]                    E = [E_1 … E_h]
//! ```
//!
//! `W_T` starts near zero and `b_T` at one, so the untrained gate is close to
//! constant and the layer starts out as a scaled sum of values.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::HiddenStates;
use crate::nn;
use crate::params::{init, ParamStore, Session};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const PREFIX: &str = "pool";

/// Added to the variance before the square root in mean-std pooling.
const STD_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Mean,
    MeanStd,
    Max,
    Random,
    SelfAttention,
    TemporalGate,
}

impl PoolingKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "mean" => PoolingKind::Mean,
            "mean_std" => PoolingKind::MeanStd,
            "max" => PoolingKind::Max,
            "random" => PoolingKind::Random,
            "self_attention" | "sap" => PoolingKind::SelfAttention,
            "temporal_gate" | "tgp" => PoolingKind::TemporalGate,
            other => return Err(Error::Config(format!("unknown pooling kind `{other}`"))),
        })
    }

    pub fn has_heads(self) -> bool {
        matches!(self, PoolingKind::SelfAttention | PoolingKind::TemporalGate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub kind: PoolingKind,
    #[serde(default = "one")]
    pub heads: usize,
}

fn one() -> usize {
    1
}

impl PoolingConfig {
    pub fn new(kind: PoolingKind, heads: usize) -> Self {
        Self { kind, heads }
    }

    /// The eight pooling variants compared in the pooling benchmark, in
    /// report order, with their display labels.
    pub fn benchmark_variants(multi_heads: usize) -> Vec<(&'static str, PoolingConfig)> {
        use PoolingKind::*;
        vec![
            ("mean", Self::new(Mean, 1)),
            ("mean-std", Self::new(MeanStd, 1)),
            ("max", Self::new(Max, 1)),
            ("random", Self::new(Random, 1)),
            ("self-attention", Self::new(SelfAttention, 1)),
            ("self-attention (multi-head)", Self::new(SelfAttention, multi_heads)),
            ("temporal gate", Self::new(TemporalGate, 1)),
            ("temporal gate (multi-head)", Self::new(TemporalGate, multi_heads)),
        ]
    }
}

/// A pooling layer bound to its input geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pooling {
    pub config: PoolingConfig,
    /// Hidden size `d` of the input.
    pub dim: usize,
    /// Encoder frames `T`; fixes the size of the timewise weight.
    pub frames: usize,
}

/// Parameters of one Temporal Gate Pooling layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TgpParams {
    pub heads: usize,
    /// `W_F`, `[d, d]`
    pub filter_weight: Tensor,
    pub filter_bias: Tensor,
    /// `W_V`, `[d, d]`
    pub value_weight: Tensor,
    pub value_bias: Tensor,
    /// `W_T`, `[T, T]`
    pub time_weight: Tensor,
    /// `b_T`, `[T]`
    pub time_bias: Tensor,
    /// Layer-norm gain and shift, `[h, dk]`.
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    /// `W_G` for every head, `[h, dk]`.
    pub gate_weight: Tensor,
    /// `b_G`, `[h]`
    pub gate_bias: Tensor,
}

impl TgpParams {
    pub fn init(dim: usize, heads: usize, frames: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("d = {dim} not divisible by {heads} heads")));
        }
        let dk = dim / heads;
        Ok(Self {
            heads,
            filter_weight: init::xavier_uniform(rng, vec![dim, dim], dim, dim),
            filter_bias: Tensor::zeros(vec![dim]),
            value_weight: init::xavier_uniform(rng, vec![dim, dim], dim, dim),
            value_bias: Tensor::zeros(vec![dim]),
            time_weight: init::uniform(rng, vec![frames, frames], 1e-3 / frames as f64),
            time_bias: Tensor::ones(vec![frames]),
            norm_gain: Tensor::ones(vec![heads, dk]),
            norm_bias: Tensor::zeros(vec![heads, dk]),
            gate_weight: init::xavier_uniform(rng, vec![heads, dk], dk, 1),
            gate_bias: Tensor::zeros(vec![heads]),
        })
    }

    pub fn dim(&self) -> usize {
        self.filter_weight.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.time_weight.shape()[0]
    }

    pub fn num_scalars(&self) -> usize {
        [
            &self.filter_weight,
            &self.filter_bias,
            &self.value_weight,
            &self.value_bias,
            &self.time_weight,
            &self.time_bias,
            &self.norm_gain,
            &self.norm_bias,
            &self.gate_weight,
            &self.gate_bias,
        ]
        .iter()
        .map(|t| t.len())
        .sum()
    }

    pub fn insert_into(&self, store: &mut ParamStore) {
        let p = PREFIX;
        store.insert(format!("{p}.f.w"), self.filter_weight.clone());
        store.insert(format!("{p}.f.b"), self.filter_bias.clone());
        store.insert(format!("{p}.v.w"), self.value_weight.clone());
        store.insert(format!("{p}.v.b"), self.value_bias.clone());
        store.insert(format!("{p}.t.w"), self.time_weight.clone());
        store.insert(format!("{p}.t.b"), self.time_bias.clone());
        store.insert(format!("{p}.ln.g"), self.norm_gain.clone());
        store.insert(format!("{p}.ln.b"), self.norm_bias.clone());
        store.insert(format!("{p}.gate.w"), self.gate_weight.clone());
        store.insert(format!("{p}.gate.b"), self.gate_bias.clone());
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| store.get(&format!("{PREFIX}.{n}")).cloned();
        let gate_bias = get("gate.b")?;
        Ok(Self {
            heads: gate_bias.len(),
            filter_weight: get("f.w")?,
            filter_bias: get("f.b")?,
            value_weight: get("v.w")?,
            value_bias: get("v.b")?,
            time_weight: get("t.w")?,
            time_bias: get("t.b")?,
            norm_gain: get("ln.g")?,
            norm_bias: get("ln.b")?,
            gate_weight: get("gate.w")?,
            gate_bias,
        })
    }
}

/// A pooled utterance embedding (`d`, or `2d` for mean-std pooling).
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub data: Vec<f64>,
}

impl Pooling {
    pub fn new(config: PoolingConfig, dim: usize, frames: usize) -> Result<Self> {
        let p = Self { config, dim, frames };
        p.validate()?;
        Ok(p)
    }

    fn heads(&self) -> usize {
        if self.config.kind.has_heads() {
            self.config.heads
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.heads();
        if h == 0 || self.dim % h != 0 {
            return Err(Error::Config(format!(
                "pooling: d = {} not divisible by {h} heads",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.config.kind {
            PoolingKind::MeanStd => 2 * self.dim,
            _ => self.dim,
        }
    }

    pub fn count_params(&self) -> usize {
        let (d, t, h) = (self.dim, self.frames, self.heads());
        match self.config.kind {
            PoolingKind::SelfAttention => d,
            PoolingKind::TemporalGate => 2 * (d * d + d) + t * t + t + 2 * d + d + h,
            _ => 0,
        }
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore) -> Result<()> {
        let h = self.heads();
        match self.config.kind {
            PoolingKind::SelfAttention => {
                let dk = self.dim / h;
                store.insert(
                    format!("{PREFIX}.att.w"),
                    init::xavier_uniform(rng, vec![h, dk], dk, 1),
                );
            }
            PoolingKind::TemporalGate => {
                TgpParams::init(self.dim, h, self.frames, rng)?.insert_into(store);
            }
            _ => {}
        }
        Ok(())
    }

    /// `[B, T, d] → [B, output_dim]`.
    pub fn forward(&self, sess: &Session, hidden: Var) -> Result<Var> {
        let g = sess.graph;
        let s = g.shape(hidden);
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::Shape(format!(
                "pooling expects [B, T, {}], got {s:?}",
                self.dim
            )));
        }
        if s[1] == 0 {
            return Err(Error::Empty("pooling over zero frames".into()));
        }
        match self.config.kind {
            PoolingKind::Mean => Ok(g.mean_axis(hidden, 1, false)),
            PoolingKind::Max => Ok(g.max_axis(hidden, 1, false)),
            PoolingKind::MeanStd => Ok(mean_std(g, hidden)),
            PoolingKind::Random => {
                let (b, t, d) = (s[0], s[1], s[2]);
                let picks: Vec<usize> = sess.with_rng(|rng| (0..b).map(|_| rng.random_range(0..t)).collect());
                let idx = picks
                    .iter()
                    .enumerate()
                    .flat_map(|(bi, &ti)| (0..d).map(move |c| (bi * t + ti) * d + c))
                    .collect();
                Ok(g.gather(hidden, Rc::new(idx), vec![b, d]))
            }
            PoolingKind::SelfAttention => {
                let w = sess.param(&format!("{PREFIX}.att.w"))?;
                Ok(self_attention(g, hidden, w, self.heads()))
            }
            PoolingKind::TemporalGate => temporal_gate(sess, hidden, self.heads(), self.frames),
        }
    }
}

fn mean_std(g: &Graph, x: Var) -> Var {
    let mean_keep = g.mean_axis(x, 1, true);
    let centered = g.sub(x, mean_keep);
    let var = g.mean_axis(g.square(centered), 1, false);
    let std = g.sqrt(g.add_scalar(var, STD_EPS));
    let mean = g.mean_axis(x, 1, false);
    g.concat(&[mean, std], 1)
}

fn self_attention(g: &Graph, x: Var, w: Var, heads: usize) -> Var {
    let s = g.shape(x);
    let (b, t, d) = (s[0], s[1], s[2]);
    let dk = d / heads;
    let xh = g.reshape(x, vec![b, t, heads, dk]);
    // scores [B, T, h] → softmax over time
    let scores = g.sum_axis(g.mul(xh, w), 3, false);
    let alpha = g.softmax(g.permute(scores, &[0, 2, 1]));
    let alpha = g.reshape(g.permute(alpha, &[0, 2, 1]), vec![b, t, heads, 1]);
    let pooled = g.sum_axis(g.mul(xh, alpha), 1, false);
    g.reshape(pooled, vec![b, d])
}

fn temporal_gate(sess: &Session, x: Var, heads: usize, frames: usize) -> Result<Var> {
    temporal_gate_parts(sess, x, heads, frames).map(|(pooled, _)| pooled)
}

/// Pooled `[B, d]` output and the `[B, T, h]` gate.
fn temporal_gate_parts(sess: &Session, x: Var, heads: usize, frames: usize) -> Result<(Var, Var)> {
    let g = sess.graph;
    let s = g.shape(x);
    let (b, t, d) = (s[0], s[1], s[2]);
    if t != frames {
        return Err(Error::Shape(format!(
            "temporal gate pooling built for {frames} frames, got {t}"
        )));
    }
    let dk = d / heads;
    let filter = nn::linear(sess, x, &format!("{PREFIX}.f"))?;
    let value = nn::linear(sess, x, &format!("{PREFIX}.v"))?;
    let w_t = sess.param(&format!("{PREFIX}.t.w"))?;
    let b_t = g.reshape(sess.param(&format!("{PREFIX}.t.b"))?, vec![t, 1]);
    let mixed = g.add(g.matmul(w_t, filter), b_t);
    let mixed = g.reshape(mixed, vec![b, t, heads, dk]);
    let normed = nn::layer_norm(sess, mixed, &format!("{PREFIX}.ln"))?;
    let w_g = sess.param(&format!("{PREFIX}.gate.w"))?;
    let b_g = sess.param(&format!("{PREFIX}.gate.b"))?;
    let logits = g.add(g.sum_axis(g.mul(normed, w_g), 3, false), b_g);
    let gate = g.sigmoid(logits);
    let value = g.reshape(value, vec![b, t, heads, dk]);
    let pooled = g.sum_axis(g.mul(value, g.reshape(gate, vec![b, t, heads, 1])), 1, false);
    Ok((g.reshape(pooled, vec![b, d]), gate))
}

/// Per-frame TGP gate values, `[T, h]`, for one utterance.
pub fn tgp_gates(hidden: &HiddenStates, params: &TgpParams) -> Result<Tensor> {
    let (store, g, x) = single(hidden, |s| params.insert_into(s));
    let sess = eval_session(&g, &store);
    let (_, gate) = temporal_gate_parts(&sess, x, params.heads, params.frames())?;
    let t = hidden.num_frames();
    Ok(g.value(gate).as_ref().clone().reshape(vec![t, params.heads]))
}

fn single(hidden: &HiddenStates, fill: impl FnOnce(&mut ParamStore)) -> (ParamStore, Graph, Var) {
    let mut store = ParamStore::new();
    fill(&mut store);
    let g = Graph::no_grad();
    let (t, d) = (hidden.num_frames(), hidden.dim());
    let x = g.constant(hidden.data.clone().reshape(vec![1, t, d]));
    (store, g, x)
}

fn eval_session<'a>(g: &'a Graph, store: &'a ParamStore) -> Session<'a> {
    use rand::SeedableRng;
    Session::eval(g, store, ChaCha8Rng::seed_from_u64(0))
}

fn embedding(g: &Graph, v: Var) -> SpeakerEmbedding {
    SpeakerEmbedding {
        data: g.value(v).data().to_vec(),
    }
}

/// Temporal Gate Pooling of one utterance.
pub fn tgp_pool(hidden: &HiddenStates, params: &TgpParams) -> Result<SpeakerEmbedding> {
    if params.dim() != hidden.dim() {
        return Err(Error::Shape(format!(
            "TGP weights are for d = {}, hidden states have d = {}",
            params.dim(),
            hidden.dim()
        )));
    }
    let pooling = Pooling::new(
        PoolingConfig::new(PoolingKind::TemporalGate, params.heads),
        hidden.dim(),
        params.frames(),
    )?;
    let (store, g, x) = single(hidden, |s| params.insert_into(s));
    let sess = eval_session(&g, &store);
    let e = pooling.forward(&sess, x)?;
    Ok(embedding(&g, e))
}

/// Mean, mean-std, max or random pooling of one utterance.
pub fn statistical_pool(hidden: &HiddenStates, kind: PoolingKind, rng: &mut ChaCha8Rng) -> Result<SpeakerEmbedding> {
    if kind.has_heads() {
        return Err(Error::Config(format!("{kind:?} is not a statistical pooling")));
    }
    if hidden.num_frames() == 0 {
        return Err(Error::Empty("pooling over zero frames".into()));
    }
    let pooling = Pooling::new(PoolingConfig::new(kind, 1), hidden.dim(), hidden.num_frames())?;
    let (store, g, x) = single(hidden, |_| {});
    use rand::SeedableRng;
    let sess = Session::eval(&g, &store, ChaCha8Rng::seed_from_u64(rng.random()));
    let e = pooling.forward(&sess, x)?;
    Ok(embedding(&g, e))
}

/// Self-attentive pooling of one utterance with score weights `[h, d / h]`.
pub fn self_attention_pool(hidden: &HiddenStates, weights: &Tensor, heads: usize) -> Result<SpeakerEmbedding> {
    let d = hidden.dim();
    if heads == 0 || d % heads != 0 || weights.shape() != [heads, d / heads] {
        return Err(Error::Shape(format!(
            "self-attention weights {:?} do not fit d = {d} with {heads} heads",
            weights.shape()
        )));
    }
    let pooling = Pooling::new(
        PoolingConfig::new(PoolingKind::SelfAttention, heads),
        d,
        hidden.num_frames(),
    )?;
    let (store, g, x) = single(hidden, |s| s.insert(format!("{PREFIX}.att.w"), weights.clone()));
    let sess = eval_session(&g, &store);
    let e = pooling.forward(&sess, x)?;
    Ok(embedding(&g, e))
}
