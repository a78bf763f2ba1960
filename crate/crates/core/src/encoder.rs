//! Conformer encoder: 4× convolutional subsampling followed by a stack of
//! Macaron-style Conformer layers with relative-position self-attention.
//!
//! ```text
//! subsampling:
//!   Conv1d(n_mels → d, k=3, s=2, p=1) → ReLU
//!   Conv1d(d → d,      k=3, s=2, p=1) → ReLU
//!   Linear(d → d) → Dropout                      T → ⌊(T−1)/2⌋+1, twice
//!
//! layer (× n_layers):
//!   x ← x + ½ · FFN₁(x)          FFN = LN → Linear(d→f) → Swish → Dropout → Linear(f→d) → Dropout
//!   x ← x + MHSA_rel(LN(x))      Transformer-XL scores: (q+u)·kᵀ + (q+v)·pᵀ
//!   x ← x + ConvModule(x)        LN → Linear(d→2d) → GLU → DepthwiseConv(k) → BN → Swish → Linear(d→d) → Dropout
//!   x ← x + ½ · FFN₂(x)
//!   x ← LN(x)
//! ```
//!
//! The per-layer scalar count is `4·d·f + 2·f + 8·d² + (k + 24)·d`; see
//! [`EncoderConfig::count_params`].

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::frontend::LogMelFrames;
use crate::nn;
use crate::params::{init, ParamStore, Session};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const PREFIX: &str = "enc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub conv_kernel: usize,
    pub dropout_p: f64,
    pub n_mels: usize,
}

/// Named encoder geometries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "256M")]
    M256,
    #[serde(rename = "512M")]
    M512,
    #[serde(rename = "768M")]
    M768,
    #[serde(rename = "256S")]
    S256,
    /// Desk-scale model for tests and quick experiments.
    #[serde(rename = "toy")]
    Toy,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::M256, Preset::M512, Preset::M768, Preset::S256, Preset::Toy];

    pub fn name(self) -> &'static str {
        match self {
            Preset::M256 => "256M",
            Preset::M512 => "512M",
            Preset::M768 => "768M",
            Preset::S256 => "256S",
            Preset::Toy => "toy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name().eq_ignore_ascii_case(name))
    }

    pub fn config(self) -> EncoderConfig {
        let (d, layers, ffn) = match self {
            Preset::M256 => (256, 16, 1024),
            Preset::M512 => (512, 4, 2048),
            Preset::M768 => (768, 2, 3076),
            Preset::S256 => (256, 2, 1024),
            Preset::Toy => (64, 2, 256),
        };
        EncoderConfig {
            hidden_size: d,
            n_layers: layers,
            n_heads: (d / 64).max(1),
            ffn_hidden: ffn,
            conv_kernel: 31,
            dropout_p: 0.1,
            n_mels: 80,
        }
    }
}

impl EncoderConfig {
    pub fn preset(p: Preset) -> Self {
        p.config()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.hidden_size;
        if d == 0 || self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {d} must be a positive multiple of n_heads {}",
                self.n_heads
            )));
        }
        if self.ffn_hidden < d {
            return Err(Error::Config(format!(
                "ffn_hidden {} smaller than hidden size {d}",
                self.ffn_hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        Ok(())
    }

    /// Frames after subsampling `frames` input frames.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        nn::conv_out_len(nn::conv_out_len(frames, 3, 2, 1), 3, 2, 1)
    }

    pub fn subsampling_params(&self) -> usize {
        let (d, m) = (self.hidden_size, self.n_mels);
        (3 * m * d + d) + (3 * d * d + d) + (d * d + d)
    }

    pub fn layer_params(&self) -> usize {
        let (d, f, k) = (self.hidden_size, self.ffn_hidden, self.conv_kernel);
        let ffn = 2 * d + nn::linear_params(d, f, true) + nn::linear_params(f, d, true);
        let mhsa = 2 * d + 4 * nn::linear_params(d, d, true) + d * d + 2 * d;
        let conv = 2 * d
            + nn::linear_params(d, 2 * d, true)
            + (k * d + d)
            + 2 * d
            + nn::linear_params(d, d, true);
        2 * ffn + mhsa + conv + 2 * d
    }

    /// Exact trainable scalar count of subsampling plus all layers.
    pub fn count_params(&self) -> usize {
        self.subsampling_params() + self.n_layers * self.layer_params()
    }
}

pub fn count_params(cfg: &EncoderConfig) -> usize {
    cfg.count_params()
}

/// Time-major `[frames, d]` encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub data: Tensor,
    pub frame_hop_ms: f64,
}

impl HiddenStates {
    pub fn new(data: Tensor, frame_hop_ms: f64) -> Self {
        assert_eq!(data.ndim(), 2, "hidden states are [frames, d]");
        Self { data, frame_hop_ms }
    }

    pub fn num_frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }
}

fn layer_prefix(i: usize) -> String {
    format!("{PREFIX}.layers.{i}")
}

/// Registers freshly initialized encoder parameters in `store`.
pub fn init_params(cfg: &EncoderConfig, rng: &mut ChaCha8Rng, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    let (d, f, h) = (cfg.hidden_size, cfg.ffn_hidden, cfg.n_heads);
    let dk = cfg.head_dim();
    nn::init_conv1d(store, rng, &format!("{PREFIX}.sub.conv1"), cfg.n_mels, d, 3);
    nn::init_conv1d(store, rng, &format!("{PREFIX}.sub.conv2"), d, d, 3);
    nn::init_linear(store, rng, &format!("{PREFIX}.sub.out"), d, d, true);
    for i in 0..cfg.n_layers {
        let p = layer_prefix(i);
        for ffn in ["ffn1", "ffn2"] {
            nn::init_layer_norm(store, &format!("{p}.{ffn}.ln"), vec![d]);
            nn::init_linear(store, rng, &format!("{p}.{ffn}.w1"), d, f, true);
            nn::init_linear(store, rng, &format!("{p}.{ffn}.w2"), f, d, true);
        }
        nn::init_layer_norm(store, &format!("{p}.mhsa.ln"), vec![d]);
        for w in ["q", "k", "v", "o"] {
            nn::init_linear(store, rng, &format!("{p}.mhsa.{w}"), d, d, true);
        }
        nn::init_linear(store, rng, &format!("{p}.mhsa.pos"), d, d, false);
        let bias_bound = (6.0 / (h + dk) as f64).sqrt();
        store.insert(format!("{p}.mhsa.pos_bias_u"), init::uniform(rng, vec![h, dk], bias_bound));
        store.insert(format!("{p}.mhsa.pos_bias_v"), init::uniform(rng, vec![h, dk], bias_bound));
        nn::init_layer_norm(store, &format!("{p}.conv.ln"), vec![d]);
        nn::init_linear(store, rng, &format!("{p}.conv.pw1"), d, 2 * d, true);
        nn::init_depthwise_conv1d(store, rng, &format!("{p}.conv.dw"), d, cfg.conv_kernel);
        nn::init_batch_norm(store, &format!("{p}.conv.bn"), d);
        nn::init_linear(store, rng, &format!("{p}.conv.pw2"), d, d, true);
        nn::init_layer_norm(store, &format!("{p}.ln_out"), vec![d]);
    }
    Ok(())
}

/// Sinusoidal table for relative offsets; row `r` encodes offset
/// `(len − 1) − r`, so rows run from `len − 1` down to `−(len − 1)`.
pub fn relative_position_table(len: usize, d: usize) -> Tensor {
    let rows = 2 * len - 1;
    let mut t = Tensor::zeros(vec![rows, d]);
    for r in 0..rows {
        let offset = (len as f64 - 1.0) - r as f64;
        let row = t.row_mut(r);
        for k in 0..d / 2 {
            let freq = (-((2 * k) as f64) * (10_000f64).ln() / d as f64).exp();
            row[2 * k] = (offset * freq).sin();
            row[2 * k + 1] = (offset * freq).cos();
        }
    }
    t
}

/// `[B, T, d] → [B, h, T, dk]`
fn split_heads(g: &Graph, x: Var, heads: usize) -> Var {
    let s = g.shape(x);
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, vec![b, t, heads, d / heads]);
    g.permute(x, &[0, 2, 1, 3])
}

/// Two stride-2 convolutions and a projection: `[B, T, n_mels] → [B, T', d]`.
pub fn subsample(sess: &Session, frames: Var, cfg: &EncoderConfig) -> Result<Var> {
    let g = sess.graph;
    let s = g.shape(frames);
    if s.len() != 3 || s[2] != cfg.n_mels {
        return Err(Error::Shape(format!(
            "encoder expects [B, T, {}] input, got {s:?}",
            cfg.n_mels
        )));
    }
    if s[1] < 4 {
        return Err(Error::Shape(format!(
            "subsampling needs at least 4 frames, got {}",
            s[1]
        )));
    }
    let x = nn::conv1d(sess, frames, &format!("{PREFIX}.sub.conv1"), 3, 2, 1)?;
    let x = g.relu(x);
    let x = nn::conv1d(sess, x, &format!("{PREFIX}.sub.conv2"), 3, 2, 1)?;
    let x = g.relu(x);
    let x = nn::linear(sess, x, &format!("{PREFIX}.sub.out"))?;
    Ok(sess.dropout(x, cfg.dropout_p))
}

fn feed_forward(sess: &Session, x: Var, prefix: &str, p: f64) -> Result<Var> {
    let g = sess.graph;
    let y = nn::layer_norm(sess, x, &format!("{prefix}.ln"))?;
    let y = nn::linear(sess, y, &format!("{prefix}.w1"))?;
    let y = sess.dropout(g.silu(y), p);
    let y = nn::linear(sess, y, &format!("{prefix}.w2"))?;
    Ok(sess.dropout(y, p))
}

fn rel_self_attention(sess: &Session, x: Var, pos: Var, prefix: &str, cfg: &EncoderConfig) -> Result<Var> {
    let g = sess.graph;
    let s = g.shape(x);
    let (b, t, d) = (s[0], s[1], s[2]);
    let h = cfg.n_heads;
    let dk = d / h;
    let q = split_heads(g, nn::linear(sess, x, &format!("{prefix}.q"))?, h);
    let k = split_heads(g, nn::linear(sess, x, &format!("{prefix}.k"))?, h);
    let v = split_heads(g, nn::linear(sess, x, &format!("{prefix}.v"))?, h);
    // [2T−1, d] → [h, 2T−1, dk]
    let p = nn::linear(sess, pos, &format!("{prefix}.pos"))?;
    let p = g.permute(g.reshape(p, vec![2 * t - 1, h, dk]), &[1, 0, 2]);

    let u = g.reshape(sess.param(&format!("{prefix}.pos_bias_u"))?, vec![1, h, 1, dk]);
    let w = g.reshape(sess.param(&format!("{prefix}.pos_bias_v"))?, vec![1, h, 1, dk]);
    let content = g.matmul_t(g.add(q, u), k, false, true);

    let qv = g.permute(g.add(q, w), &[1, 0, 2, 3]);
    let qv = g.reshape(qv, vec![h, b * t, dk]);
    let by_offset = g.matmul_t(qv, p, false, true);
    let by_offset = g.permute(g.reshape(by_offset, vec![h, b, t, 2 * t - 1]), &[1, 0, 2, 3]);
    // score[i, j] reads the table row for offset i − j
    let width = 2 * t - 1;
    let mut idx = Vec::with_capacity(b * h * t * t);
    for bh in 0..b * h {
        for i in 0..t {
            for j in 0..t {
                idx.push((bh * t + i) * width + (t - 1 - i + j));
            }
        }
    }
    let position = g.gather(by_offset, Rc::new(idx), vec![b, h, t, t]);

    let scores = g.scale(g.add(content, position), 1.0 / (dk as f64).sqrt());
    let attn = g.softmax(scores);
    let ctx = g.matmul(attn, v);
    let ctx = g.reshape(g.permute(ctx, &[0, 2, 1, 3]), vec![b, t, d]);
    nn::linear(sess, ctx, &format!("{prefix}.o"))
}

fn conv_module(sess: &Session, x: Var, prefix: &str) -> Result<Var> {
    let g = sess.graph;
    let y = nn::layer_norm(sess, x, &format!("{prefix}.ln"))?;
    let y = nn::linear(sess, y, &format!("{prefix}.pw1"))?;
    let y = nn::glu(g, y);
    let y = nn::depthwise_conv1d(sess, y, &format!("{prefix}.dw"))?;
    let y = nn::batch_norm(sess, y, &format!("{prefix}.bn"))?;
    let y = g.silu(y);
    nn::linear(sess, y, &format!("{prefix}.pw2"))
}

/// One Conformer layer on `[B, T, d]`; `pos` is the `[2T−1, d]` relative
/// position table.
pub fn conformer_layer(sess: &Session, x: Var, pos: Var, layer: usize, cfg: &EncoderConfig) -> Result<Var> {
    let g = sess.graph;
    let s = g.shape(x);
    if s.len() != 3 || s[2] != cfg.hidden_size {
        return Err(Error::Shape(format!(
            "conformer layer expects [B, T, {}], got {s:?}",
            cfg.hidden_size
        )));
    }
    let p = layer_prefix(layer);
    let drop = cfg.dropout_p;
    let ff = feed_forward(sess, x, &format!("{p}.ffn1"), drop)?;
    let x = g.add(x, g.scale(ff, 0.5));
    let xn = nn::layer_norm(sess, x, &format!("{p}.mhsa.ln"))?;
    let att = rel_self_attention(sess, xn, pos, &format!("{p}.mhsa"), cfg)?;
    let x = g.add(x, sess.dropout(att, drop));
    let conv = conv_module(sess, x, &format!("{p}.conv"))?;
    let x = g.add(x, sess.dropout(conv, drop));
    let ff = feed_forward(sess, x, &format!("{p}.ffn2"), drop)?;
    let x = g.add(x, g.scale(ff, 0.5));
    nn::layer_norm(sess, x, &format!("{p}.ln_out"))
}

/// Full encoder on a `[B, T, n_mels]` batch.
pub fn encode(sess: &Session, frames: Var, cfg: &EncoderConfig) -> Result<Var> {
    let mut x = subsample(sess, frames, cfg)?;
    let t = sess.graph.shape(x)[1];
    let pos = sess.graph.constant(relative_position_table(t, cfg.hidden_size));
    for i in 0..cfg.n_layers {
        x = conformer_layer(sess, x, pos, i, cfg)?;
    }
    Ok(x)
}

/// Inference on one utterance (evaluation mode, no gradients).
pub fn encode_frames(store: &ParamStore, cfg: &EncoderConfig, frames: &LogMelFrames) -> Result<HiddenStates> {
    use rand::SeedableRng;
    let g = Graph::no_grad();
    let sess = Session::eval(&g, store, ChaCha8Rng::seed_from_u64(0));
    let (n, m) = (frames.num_frames(), frames.n_mels());
    let x = g.constant(frames.data.clone().reshape(vec![1, n, m]));
    let y = encode(&sess, x, cfg)?;
    let out = g.value(y);
    let (t, d) = (out.shape()[1], out.shape()[2]);
    Ok(HiddenStates::new(
        out.as_ref().clone().reshape(vec![t, d]),
        frames.frame_hop_ms * 4.0,
    ))
}
