//! Central finite-difference checks of analytic gradients.
//!
//! Every check builds a scalar loss from parameters held in a
//! [`ParamStore`]; inputs whose gradient matters are stored as parameters
//! too. Sessions run in evaluation mode, so dropout is off and batch norm
//! uses its running statistics.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::bestrq::{self, MaskConfig, MaskPlan, QuantizerState};
use crate::classifier::ClassifierConfig;
use crate::encoder::{self, EncoderConfig};
use crate::frontend::LogMelFrames;
use crate::model::SpeakerModel;
use crate::nn;
use crate::params::{init, ParamStore, Session};
use crate::pooling::{Pooling, PoolingConfig, PoolingKind};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Scales the denominator floor of [`relative_error`] with the loss value.
///
/// Rounding in the forward pass leaves an absolute error of a few ulps of
/// `|L|` in each loss evaluation, so a central difference carries roughly
/// `|L| · 1e-16 / eps` of noise whatever the true gradient. Gradients much
/// smaller than `FLOOR_SCALE · |L|` are therefore compared in absolute terms.
pub const FLOOR_SCALE: f64 = 1e-4;

pub fn denominator_floor(loss: f64) -> f64 {
    FLOOR_SCALE * loss.abs().max(1.0)
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per tensor; tensors at or below this size are
    /// checked exhaustively.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            max_coords_per_tensor: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinate with the largest error, as `tensor[index]`.
    pub worst: String,
    pub checked: usize,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} max rel err {:.3e} over {} coords (worst {})",
            self.name, self.max_rel_error, self.checked, self.worst
        )
    }
}

/// Compares the backward pass of `loss` against central differences for
/// every (or a sample of every) parameter coordinate in `store`.
pub fn grad_check(
    name: &str,
    store: &ParamStore,
    loss: impl Fn(&Session) -> Result<Var>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let eval = |s: &ParamStore, grad: bool| -> Result<(f64, Option<std::collections::BTreeMap<String, Tensor>>)> {
        let g = if grad { Graph::new() } else { Graph::no_grad() };
        let sess = Session::eval(&g, s, ChaCha8Rng::seed_from_u64(opts.seed));
        let l = loss(&sess)?;
        let value = g.value_ref(l).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("{name}: loss is {value}")));
        }
        let grads = grad.then(|| {
            let mut gr = g.backward(l);
            sess.gradients(&mut gr)
        });
        Ok((value, grads))
    };
    let (base, grads) = eval(store, true)?;
    let grads = grads.unwrap_or_default();
    let floor = denominator_floor(base);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let names: Vec<String> = store.names().cloned().collect();
    for pname in names {
        let n = store.get(&pname)?.len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_tensor {
            (0..n).collect()
        } else {
            (0..opts.max_coords_per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for i in coords {
            let orig = store.get(&pname)?.data()[i];
            probe.get_mut(&pname)?.data_mut()[i] = orig + opts.eps;
            let (up, _) = eval(&probe, false)?;
            probe.get_mut(&pname)?.data_mut()[i] = orig - opts.eps;
            let (down, _) = eval(&probe, false)?;
            probe.get_mut(&pname)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let analytic = grads.get(&pname).map_or(0.0, |t| t.data()[i]);
            let err = relative_error(analytic, numeric, floor);
            if !err.is_finite() {
                return Err(Error::Numerical(format!("{name}: non-finite gradient at {pname}[{i}]")));
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = format!("{pname}[{i}]");
            }
        }
    }
    Ok(report)
}

/// Non-linear scalar probe `Σ (x ⊙ R)²` for an arbitrary-valued output.
fn probe_loss(sess: &Session, x: Var, seed: u64) -> Var {
    let g = sess.graph;
    let shape = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(init::normal(&mut rng, shape, 1.0));
    g.sum_all(g.square(g.mul(x, r)))
}

fn random_input(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>) {
    store.insert(name, init::normal(rng, shape, 1.0));
}

/// Fills batch-norm running statistics with non-trivial values so the eval
/// path is exercised with a real affine map.
fn randomize_buffers(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<(String, Vec<usize>)> = store
        .buffers()
        .map(|(k, v)| (k.clone(), v.shape().to_vec()))
        .collect();
    for (k, shape) in names {
        let t = if k.ends_with("running_var") {
            Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
        } else {
            init::normal(rng, shape, 0.3)
        };
        store.insert_buffer(k, t);
    }
}

/// Gives the biases and affine terms that start at 0 or 1 random values, so
/// no gradient path is trivially linear.
fn perturb_all(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v += scale * (rng.random::<f64>() - 0.5));
    }
}

fn toy_encoder(d: usize, n_mels: usize, layers: usize) -> EncoderConfig {
    EncoderConfig {
        hidden_size: d,
        n_layers: layers,
        n_heads: 2,
        ffn_hidden: 2 * d,
        conv_kernel: 5,
        dropout_p: 0.1,
        n_mels,
    }
}

fn linear_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    nn::init_linear(&mut store, &mut rng, "lin", 5, 3, true);
    random_input(&mut store, &mut rng, "input", vec![4, 5]);
    perturb_all(&mut store, &mut rng, 0.5);
    grad_check(
        "linear",
        &store,
        |s| {
            let x = s.param("input")?;
            Ok(probe_loss(s, nn::linear(s, x, "lin")?, 11))
        },
        opts,
    )
}

fn pooling_check(name: &str, cfg: PoolingConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (d, t) = (4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pooling = Pooling::new(cfg, d, t)?;
    let mut store = ParamStore::new();
    pooling.init_params(&mut rng, &mut store)?;
    perturb_all(&mut store, &mut rng, 0.5);
    random_input(&mut store, &mut rng, "input", vec![2, t, d]);
    grad_check(
        name,
        &store,
        |s| {
            let e = pooling.forward(s, s.param("input")?)?;
            Ok(probe_loss(s, e, 12))
        },
        opts,
    )
}

fn aam_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cls = ClassifierConfig::new(6, 4, 5);
    let mut store = ParamStore::new();
    cls.init_params(&mut rng, &mut store)?;
    perturb_all(&mut store, &mut rng, 0.2);
    random_input(&mut store, &mut rng, "input", vec![3, 6]);
    let targets = [0usize, 3, 4];
    grad_check(
        "aam loss",
        &store,
        |s| {
            let x = cls.project(s, s.param("input")?)?;
            cls.loss(s, x, &targets)
        },
        opts,
    )
}

fn conformer_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (d, t) = (16, 8);
    let cfg = toy_encoder(d, 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut all = ParamStore::new();
    encoder::init_params(&cfg, &mut rng, &mut all)?;
    let mut store = ParamStore::new();
    store.copy_prefix_from(&all, "enc.layers.0.");
    perturb_all(&mut store, &mut rng, 0.2);
    randomize_buffers(&mut store, &mut rng);
    random_input(&mut store, &mut rng, "input", vec![1, t, d]);
    let pos = encoder::relative_position_table(t, d);
    grad_check(
        "conformer layer",
        &store,
        |s| {
            let p = s.graph.constant(pos.clone());
            let y = encoder::conformer_layer(s, s.param("input")?, p, 0, &cfg)?;
            Ok(probe_loss(s, y, 13))
        },
        opts,
    )
}

fn bestrq_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (n_mels, frames, d) = (8, 24, 16);
    let cfg = toy_encoder(d, n_mels, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    encoder::init_params(&cfg, &mut rng, &mut store)?;
    bestrq::init_head(&mut store, &mut rng, d, 32);
    perturb_all(&mut store, &mut rng, 0.2);
    randomize_buffers(&mut store, &mut rng);
    let q = QuantizerState::with_codebook_size(9, n_mels, 32);
    let clean = LogMelFrames::new(init::normal(&mut rng, vec![frames, n_mels], 1.0), 10.0);
    let labels = bestrq::quantize_targets(&clean, &q)?;
    let plan = bestrq::make_mask_plan(frames, &MaskConfig { prob: 0.2, span: 8 }, &mut rng)?;
    let plan = if plan.target_positions().iter().any(|&m| m) {
        plan
    } else {
        MaskPlan::from_spans(frames, vec![(0, 8)])
    };
    let masked = bestrq::apply_mask(&clean, &plan, &mut rng)?;
    let input = masked.data.clone().reshape(vec![1, frames, n_mels]);
    grad_check(
        "bestrq loss",
        &store,
        |s| {
            let x = s.graph.constant(input.clone());
            let h = encoder::encode(s, x, &cfg)?;
            let (loss, _) = bestrq::bestrq_loss_graph(s, h, std::slice::from_ref(&labels), std::slice::from_ref(&plan))?;
            Ok(loss)
        },
        opts,
    )
}

fn pipeline_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (n_mels, frames, d) = (8, 16, 16);
    let model = SpeakerModel::new(
        toy_encoder(d, n_mels, 1),
        PoolingConfig::new(PoolingKind::TemporalGate, 2),
        frames,
        4,
        0.2,
        30.0,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    model.init_params(&mut rng, &mut store)?;
    perturb_all(&mut store, &mut rng, 0.2);
    randomize_buffers(&mut store, &mut rng);
    let input = init::normal(&mut rng, vec![2, frames, n_mels], 1.0);
    let targets = [1usize, 2];
    grad_check(
        "full pipeline",
        &store,
        |s| {
            let x = s.graph.constant(input.clone());
            Ok(model.loss(s, x, &targets)?.0)
        },
        opts,
    )
}

/// The standard suite: a linear layer, every differentiable pooling, the AAM
/// loss, one Conformer layer, the composed BEST-RQ loss and the full
/// speaker-identification pipeline, all at toy sizes.
pub fn suite(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    use PoolingKind::*;
    Ok(vec![
        linear_check(opts)?,
        pooling_check("tgp", PoolingConfig::new(TemporalGate, 1), opts)?,
        pooling_check("tgp multi-head", PoolingConfig::new(TemporalGate, 2), opts)?,
        pooling_check("self-attention", PoolingConfig::new(SelfAttention, 1), opts)?,
        pooling_check("self-attention heads", PoolingConfig::new(SelfAttention, 2), opts)?,
        pooling_check("mean", PoolingConfig::new(Mean, 1), opts)?,
        pooling_check("mean-std", PoolingConfig::new(MeanStd, 1), opts)?,
        pooling_check("max", PoolingConfig::new(Max, 1), opts)?,
        aam_check(opts)?,
        conformer_check(opts)?,
        bestrq_check(opts)?,
        pipeline_check(opts)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_applies_to_tiny_gradients() {
        let floor = denominator_floor(0.5);
        assert_eq!(floor, 1e-4);
        assert_eq!(relative_error(0.0, 0.0, floor), 0.0);
        assert!((relative_error(0.0, 1e-10, floor) - 1e-6).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0, floor) - 0.5).abs() < 1e-15);
        assert!((denominator_floor(-200.0) - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![2], vec![0.3, -0.7]));
        // d/dx of x·stop(x) is reported as x instead of 2x
        let r = grad_check(
            "broken",
            &store,
            |s| {
                let x = s.param("x")?;
                let c = s.graph.constant(s.store().get("x")?.clone());
                Ok(s.graph.sum_all(s.graph.mul(x, c)))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r}");
    }
}
