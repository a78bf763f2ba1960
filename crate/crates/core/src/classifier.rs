//! Speaker classifier: a fully connected projection followed by additive
//! angular margin (ArcFace / AAM-Softmax) logits.
//!
//! With `x̂`, `ŵ_j` the L2-normalized projection and class weights, and
//! `cos θ_j = ⟨x̂, ŵ_j⟩`, training logits are `s·cos(θ_y + m)` for the target
//! class `y` and `s·cos θ_j` elsewhere. Past `θ_y > π − m`, where `cos(θ + m)`
//! would start increasing again, the target logit falls back to
//! `s·(cos θ_y − m·sin m)`. Inference logits carry no margin.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Graph, Var};
use crate::nn;
use crate::params::{init, ParamStore, Session};
use crate::pooling::SpeakerEmbedding;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const PREFIX: &str = "cls";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Width of the pooled embedding.
    pub input_dim: usize,
    /// Width of the projected embedding.
    pub dim: usize,
    pub n_speakers: usize,
    pub margin: f64,
    pub scale: f64,
}

impl ClassifierConfig {
    pub fn new(input_dim: usize, dim: usize, n_speakers: usize) -> Self {
        Self {
            input_dim,
            dim,
            n_speakers,
            margin: 0.2,
            scale: 30.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!("margin {} outside [0, π/2)", self.margin)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("scale {} must be positive", self.scale)));
        }
        if self.n_speakers < 2 {
            return Err(Error::Config("need at least two speakers".into()));
        }
        Ok(())
    }

    pub fn count_params(&self) -> usize {
        nn::linear_params(self.input_dim, self.dim, true) + self.n_speakers * self.dim
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore) -> Result<()> {
        self.validate()?;
        nn::init_linear(store, rng, &format!("{PREFIX}.fc"), self.input_dim, self.dim, true);
        store.insert(
            format!("{PREFIX}.class_weights"),
            init::xavier_uniform(rng, vec![self.n_speakers, self.dim], self.dim, self.n_speakers),
        );
        Ok(())
    }

    /// `[B, input_dim] → [B, dim]`
    pub fn project(&self, sess: &Session, embedding: Var) -> Result<Var> {
        nn::linear(sess, embedding, &format!("{PREFIX}.fc"))
    }

    /// Cosine similarities `[B, n_speakers]` between projections and class
    /// weights. Fails on a zero-norm projection.
    pub fn cosines(&self, sess: &Session, projected: Var) -> Result<Var> {
        let g = sess.graph;
        {
            let v = g.value_ref(projected);
            let d = *v.shape().last().unwrap_or(&0);
            if v.data().chunks(d.max(1)).any(|r| r.iter().all(|&x| x == 0.0)) {
                return Err(Error::Numerical("zero-norm embedding".into()));
            }
        }
        let x = nn::l2_normalize(g, projected);
        let w = nn::l2_normalize(g, sess.param(&format!("{PREFIX}.class_weights"))?);
        Ok(g.matmul_t(x, w, false, true))
    }

    /// Margin logits when `targets` is given, plain scaled cosines otherwise.
    pub fn logits(&self, sess: &Session, projected: Var, targets: Option<&[usize]>) -> Result<Var> {
        if let Some(t) = targets {
            if let Some(&bad) = t.iter().find(|&&y| y >= self.n_speakers) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    size: self.n_speakers,
                });
            }
        }
        let cos = self.cosines(sess, projected)?;
        Ok(sess.graph.angular_margin(cos, targets, self.margin, self.scale))
    }

    /// Mean cross-entropy over training-mode margin logits.
    pub fn loss(&self, sess: &Session, projected: Var, targets: &[usize]) -> Result<Var> {
        let logits = self.logits(sess, projected, Some(targets))?;
        nn::cross_entropy(sess.graph, logits, targets)
    }
}

/// Standalone classifier weights, for single-embedding use.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// `[input_dim, dim]`
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
    /// `[n_speakers, dim]`, normalized per row when used.
    pub class_weights: Tensor,
    pub margin: f64,
    pub scale: f64,
}

impl ClassifierParams {
    pub fn config(&self) -> ClassifierConfig {
        ClassifierConfig {
            input_dim: self.fc_weight.shape()[0],
            dim: self.fc_weight.shape()[1],
            n_speakers: self.class_weights.shape()[0],
            margin: self.margin,
            scale: self.scale,
        }
    }

    pub fn from_store(store: &ParamStore, margin: f64, scale: f64) -> Result<Self> {
        Ok(Self {
            fc_weight: store.get(&format!("{PREFIX}.fc.w"))?.clone(),
            fc_bias: store.get(&format!("{PREFIX}.fc.b"))?.clone(),
            class_weights: store.get(&format!("{PREFIX}.class_weights"))?.clone(),
            margin,
            scale,
        })
    }

    fn store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(format!("{PREFIX}.fc.w"), self.fc_weight.clone());
        s.insert(format!("{PREFIX}.fc.b"), self.fc_bias.clone());
        s.insert(format!("{PREFIX}.class_weights"), self.class_weights.clone());
        s
    }
}

fn with_session<T>(params: &ClassifierParams, f: impl FnOnce(&Session, ClassifierConfig) -> Result<T>) -> Result<T> {
    use rand::SeedableRng;
    let store = params.store();
    let g = Graph::no_grad();
    let sess = Session::eval(&g, &store, ChaCha8Rng::seed_from_u64(0));
    f(&sess, params.config())
}

/// `E · W_fc + b_fc` for one embedding.
pub fn project(embedding: &SpeakerEmbedding, params: &ClassifierParams) -> Result<Vec<f64>> {
    let d_in = params.fc_weight.shape()[0];
    if embedding.data.len() != d_in {
        return Err(Error::Shape(format!(
            "embedding of width {} vs projection input {d_in}",
            embedding.data.len()
        )));
    }
    with_session(params, |sess, cfg| {
        let g = sess.graph;
        let e = g.constant(Tensor::new(vec![1, d_in], embedding.data.clone()));
        let y = cfg.project(sess, e)?;
        Ok(g.value(y).data().to_vec())
    })
}

/// Logits for one projected embedding; margin applied to `target` if given.
pub fn aam_logits(x: &[f64], params: &ClassifierParams, target: Option<usize>) -> Result<Vec<f64>> {
    let d = params.class_weights.shape()[1];
    if x.len() != d {
        return Err(Error::Shape(format!("vector of width {} vs class weights {d}", x.len())));
    }
    with_session(params, |sess, cfg| {
        let g = sess.graph;
        let xv = g.constant(Tensor::new(vec![1, d], x.to_vec()));
        let targets = target.map(|t| vec![t]);
        let logits = cfg.logits(sess, xv, targets.as_deref())?;
        Ok(g.value(logits).data().to_vec())
    })
}

/// Most probable speaker (lowest id on ties) and the softmax over inference
/// logits.
pub fn classify(embedding: &SpeakerEmbedding, params: &ClassifierParams) -> Result<(usize, Vec<f64>)> {
    let x = project(embedding, params)?;
    let logits = aam_logits(&x, params, None)?;
    let mut probs = logits;
    softmax_in_place(&mut probs);
    Ok((argmax(&probs), probs))
}

/// Index of the first maximal element.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_2d(class_weights: Vec<Vec<f64>>) -> ClassifierParams {
        let d = class_weights[0].len();
        ClassifierParams {
            fc_weight: Tensor::from_fn(vec![d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }),
            fc_bias: Tensor::zeros(vec![d]),
            class_weights: Tensor::from_rows(&class_weights),
            margin: 0.2,
            scale: 30.0,
        }
    }

    #[test]
    fn identity_projection() {
        let p = params_2d(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let e = SpeakerEmbedding { data: vec![0.5, -2.0] };
        assert_eq!(project(&e, &p).unwrap(), vec![0.5, -2.0]);
    }

    #[test]
    fn zero_weight_projection_is_bias() {
        let mut p = params_2d(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        p.fc_weight = Tensor::zeros(vec![2, 2]);
        p.fc_bias = Tensor::new(vec![2], vec![0.25, 4.0]);
        let e = SpeakerEmbedding { data: vec![7.0, 9.0] };
        assert_eq!(project(&e, &p).unwrap(), vec![0.25, 4.0]);
    }

    #[test]
    fn projection_dim_mismatch() {
        let p = params_2d(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let e = SpeakerEmbedding { data: vec![1.0; 3] };
        assert!(matches!(project(&e, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn aligned_target_logit() {
        let p = params_2d(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = aam_logits(&[3.0, 0.0], &p, Some(0)).unwrap();
        let expected = 30.0 * ((1.0f64 - 1e-7).acos() + 0.2).cos();
        assert!((l[0] - expected).abs() < 1e-9);
        // the cosine clamp leaves θ ≈ 4.5e-4 at perfect alignment
        assert!((l[0] - 29.4020).abs() < 5e-3);
    }

    #[test]
    fn zero_norm_is_an_error() {
        let p = params_2d(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(aam_logits(&[0.0, 0.0], &p, None), Err(Error::Numerical(_))));
    }

    #[test]
    fn classify_aligned_and_tied() {
        let p = params_2d(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (id, probs) = classify(&SpeakerEmbedding { data: vec![2.0, 0.1] }, &p).unwrap();
        assert_eq!(id, 0);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let tied = params_2d(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let (id, probs) = classify(&SpeakerEmbedding { data: vec![1.0, 1.0] }, &tied).unwrap();
        assert_eq!(id, 0);
        assert!(probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn out_of_vocabulary_target() {
        let p = params_2d(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            aam_logits(&[1.0, 0.0], &p, Some(5)),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = ClassifierConfig::new(4, 4, 10);
        assert!(c.validate().is_ok());
        c.margin = 2.0;
        assert!(c.validate().is_err());
        let c = ClassifierConfig::new(4, 4, 1);
        assert!(c.validate().is_err());
    }
}
