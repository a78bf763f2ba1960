//! Layer building blocks shared by the encoder, pooling and heads.
//!
//! Each block has an `init_*` function that registers its tensors in a
//! [`ParamStore`] under a prefix, and a forward function that reads them back
//! through a [`Session`]. Linear weights are stored `[in, out]`.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var, PAD};
use crate::params::{init, ParamStore, Session};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
) {
    store.insert(
        format!("{prefix}.w"),
        init::xavier_uniform(rng, vec![d_in, d_out], d_in, d_out),
    );
    if bias {
        store.insert(format!("{prefix}.b"), Tensor::zeros(vec![d_out]));
    }
}

pub fn linear_params(d_in: usize, d_out: usize, bias: bool) -> usize {
    d_in * d_out + if bias { d_out } else { 0 }
}

/// `x · W (+ b)` over the last axis of `x`.
pub fn linear(sess: &Session, x: Var, prefix: &str) -> Result<Var> {
    let g = sess.graph;
    let w = sess.param(&format!("{prefix}.w"))?;
    let (x_shape, w_shape) = (g.shape(x), g.shape(w));
    let d_in = *x_shape.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
    if d_in != w_shape[0] {
        return Err(Error::Shape(format!(
            "{prefix}: input width {d_in} vs weight {:?}",
            w_shape
        )));
    }
    let rows = x_shape.iter().rev().skip(1).product::<usize>();
    let flat = g.reshape(x, vec![rows, d_in]);
    let mut y = g.matmul(flat, w);
    let bias = format!("{prefix}.b");
    if sess.store().contains(&bias) {
        y = g.add(y, sess.param(&bias)?);
    }
    let mut out_shape = x_shape;
    *out_shape.last_mut().unwrap() = w_shape[1];
    Ok(g.reshape(y, out_shape))
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, shape: impl Into<Vec<usize>>) {
    let shape = shape.into();
    store.insert(format!("{prefix}.g"), Tensor::ones(shape.clone()));
    store.insert(format!("{prefix}.b"), Tensor::zeros(shape));
}

/// Layer norm over the last axis with a learned affine whose shape is a
/// suffix of the input shape.
pub fn layer_norm(sess: &Session, x: Var, prefix: &str) -> Result<Var> {
    let g = sess.graph;
    let xhat = g.standardize_last(x, LAYER_NORM_EPS);
    let gamma = sess.param(&format!("{prefix}.g"))?;
    let beta = sess.param(&format!("{prefix}.b"))?;
    Ok(g.add(g.mul(xhat, gamma), beta))
}

pub fn init_batch_norm(store: &mut ParamStore, prefix: &str, channels: usize) {
    store.insert(format!("{prefix}.g"), Tensor::ones(vec![channels]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![channels]));
    store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(vec![channels]));
    store.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(vec![channels]));
}

/// Batch norm over the last axis.
///
/// Training mode normalizes with the statistics of every leading position in
/// the batch and queues an exponential-moving-average update of the running
/// statistics (momentum 0.1, unbiased variance). Evaluation mode normalizes
/// with the running statistics, which makes the layer a fixed affine map.
pub fn batch_norm(sess: &Session, x: Var, prefix: &str) -> Result<Var> {
    let g = sess.graph;
    let mean_name = format!("{prefix}.running_mean");
    let var_name = format!("{prefix}.running_var");
    let xhat = if sess.is_training() {
        let (xhat, mean, var) = g.standardize_channels(x, BATCH_NORM_EPS);
        let shape = g.shape(x);
        let n = shape.iter().rev().skip(1).product::<usize>() as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let (rm, rv) = (sess.buffer(&mean_name)?, sess.buffer(&var_name)?);
        let m = BATCH_NORM_MOMENTUM;
        let new_mean = Tensor::from_fn(vec![mean.len()], |j| (1.0 - m) * rm.data()[j] + m * mean[j]);
        let new_var = Tensor::from_fn(vec![var.len()], |j| {
            (1.0 - m) * rv.data()[j] + m * var[j] * unbias
        });
        sess.queue_buffer_update(mean_name, new_mean);
        sess.queue_buffer_update(var_name, new_var);
        xhat
    } else {
        let rm = sess.buffer(&mean_name)?.clone();
        let inv = sess
            .buffer(&var_name)?
            .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt());
        let centered = g.sub(x, g.constant(rm));
        g.mul(centered, g.constant(inv))
    };
    let gamma = sess.param(&format!("{prefix}.g"))?;
    let beta = sess.param(&format!("{prefix}.b"))?;
    Ok(g.add(g.mul(xhat, gamma), beta))
}

/// Gated linear unit over the last axis: `a ⊙ sigmoid(b)` for halves `a, b`.
pub fn glu(g: &Graph, x: Var) -> Var {
    let shape = g.shape(x);
    let axis = shape.len() - 1;
    let half = shape[axis] / 2;
    let a = g.narrow(x, axis, 0, half);
    let b = g.narrow(x, axis, half, half);
    g.mul(a, g.sigmoid(b))
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    if len + 2 * pad < kernel {
        0
    } else {
        (len + 2 * pad - kernel) / stride + 1
    }
}

/// Flat gather indices that unfold `[batch, len, channels]` into
/// `[batch, out_len, kernel, channels]` windows, zero-padded by `pad` frames on
/// both ends.
pub fn unfold_time_index(
    batch: usize,
    len: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Rc<Vec<usize>>, usize) {
    let out_len = conv_out_len(len, kernel, stride, pad);
    let mut idx = Vec::with_capacity(batch * out_len * kernel * channels);
    for b in 0..batch {
        for t in 0..out_len {
            for k in 0..kernel {
                let src = (t * stride + k) as isize - pad as isize;
                for c in 0..channels {
                    if src < 0 || src as usize >= len {
                        idx.push(PAD);
                    } else {
                        idx.push((b * len + src as usize) * channels + c);
                    }
                }
            }
        }
    }
    (Rc::new(idx), out_len)
}

pub fn init_conv1d(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
) {
    store.insert(
        format!("{prefix}.w"),
        init::xavier_uniform(rng, vec![kernel * c_in, c_out], kernel * c_in, c_out),
    );
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![c_out]));
}

/// 1-D convolution over the time axis of `[batch, len, c_in]`, weight stored
/// `[kernel · c_in, c_out]` (kernel-major).
pub fn conv1d(sess: &Session, x: Var, prefix: &str, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
    let g = sess.graph;
    let s = g.shape(x);
    if s.len() != 3 {
        return Err(Error::Shape(format!("conv1d expects [B, T, C], got {s:?}")));
    }
    let (b, t, c) = (s[0], s[1], s[2]);
    let (idx, out_len) = unfold_time_index(b, t, c, kernel, stride, pad);
    if out_len == 0 {
        return Err(Error::Shape(format!("{prefix}: input of {t} frames too short")));
    }
    let cols = g.gather(x, idx, vec![b, out_len, kernel * c]);
    linear(sess, cols, prefix)
}

pub fn init_depthwise_conv1d(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    channels: usize,
    kernel: usize,
) {
    let bound = 1.0 / (kernel as f64).sqrt();
    store.insert(format!("{prefix}.w"), init::uniform(rng, vec![kernel, channels], bound));
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![channels]));
}

/// Depthwise "same" convolution over time: `[B, T, C]` with weight `[K, C]`.
pub fn depthwise_conv1d(sess: &Session, x: Var, prefix: &str) -> Result<Var> {
    let g = sess.graph;
    let s = g.shape(x);
    let w = sess.param(&format!("{prefix}.w"))?;
    let kernel = g.shape(w)[0];
    let (b, t, c) = (s[0], s[1], s[2]);
    let (idx, out_len) = unfold_time_index(b, t, c, kernel, 1, kernel / 2);
    debug_assert_eq!(out_len, t);
    let windows = g.gather(x, idx, vec![b, t, kernel, c]);
    let y = g.sum_axis(g.mul(windows, w), 2, false);
    Ok(g.add(y, sess.param(&format!("{prefix}.b"))?))
}

/// Divides each last-axis vector by its Euclidean norm.
pub fn l2_normalize(g: &Graph, x: Var) -> Var {
    let axis = g.shape(x).len() - 1;
    let norm = g.sqrt(g.sum_axis(g.square(x), axis, true));
    g.div(x, norm)
}

/// Mean cross-entropy of `[rows, classes]` logits against `targets`.
pub fn cross_entropy(g: &Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape(format!(
            "cross_entropy: logits {shape:?} vs {} targets",
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Empty("cross_entropy over zero rows".into()));
    }
    let classes = shape[1];
    if let Some(&bad) = targets.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, size: classes });
    }
    let logp = g.log_softmax(logits);
    let idx: Vec<usize> = targets.iter().enumerate().map(|(r, &y)| r * classes + y).collect();
    let picked = g.gather(logp, Rc::new(idx), vec![targets.len()]);
    Ok(g.neg(g.mean_all(picked)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_length_formula() {
        assert_eq!(conv_out_len(1500, 3, 2, 1), 750);
        assert_eq!(conv_out_len(750, 3, 2, 1), 375);
        assert_eq!(conv_out_len(4, 3, 2, 1), 2);
        assert_eq!(conv_out_len(2, 3, 2, 1), 1);
    }

    #[test]
    fn unfold_pads_with_zero() {
        let (idx, n) = unfold_time_index(1, 2, 1, 3, 1, 1);
        assert_eq!(n, 2);
        assert_eq!(*idx, vec![PAD, 0, 1, 0, 1, PAD]);
    }
}
