//! The speaker-identification model: encoder, pooling and classifier wired
//! over one [`ParamStore`].

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::classifier::{argmax, ClassifierConfig};
use crate::encoder::{self, EncoderConfig};
use crate::frontend::LogMelFrames;
use crate::params::{ParamStore, Session};
use crate::pooling::{Pooling, PoolingConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerModel {
    pub encoder: EncoderConfig,
    pub pooling: Pooling,
    pub classifier: ClassifierConfig,
    /// Mel frames per utterance.
    pub mel_frames: usize,
}

impl SpeakerModel {
    /// Projection width equals the encoder width.
    pub fn new(
        encoder: EncoderConfig,
        pooling: PoolingConfig,
        mel_frames: usize,
        n_speakers: usize,
        margin: f64,
        scale: f64,
    ) -> Result<Self> {
        encoder.validate()?;
        if mel_frames < 4 {
            return Err(Error::Config(format!("{mel_frames} mel frames is below the subsampling minimum of 4")));
        }
        let d = encoder.hidden_size;
        let pooling = Pooling::new(pooling, d, encoder.subsampled_len(mel_frames))?;
        let mut classifier = ClassifierConfig::new(pooling.output_dim(), d, n_speakers);
        classifier.margin = margin;
        classifier.scale = scale;
        classifier.validate()?;
        Ok(Self {
            encoder,
            pooling,
            classifier,
            mel_frames,
        })
    }

    pub fn count_params(&self) -> usize {
        self.encoder.count_params() + self.pooling.count_params() + self.classifier.count_params()
    }

    /// Initializes every parameter. Encoder weights can be overwritten
    /// afterwards from a pre-training checkpoint.
    pub fn init_params(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore) -> Result<()> {
        encoder::init_params(&self.encoder, rng, store)?;
        self.pooling.init_params(rng, store)?;
        self.classifier.init_params(rng, store)
    }

    /// `[B, mel_frames, n_mels] → [B, dim]` projected embeddings.
    pub fn embed(&self, sess: &Session, frames: Var) -> Result<Var> {
        let hidden = encoder::encode(sess, frames, &self.encoder)?;
        self.embed_hidden(sess, hidden)
    }

    /// Pooling and projection of encoder output `[B, T', d]`.
    pub fn embed_hidden(&self, sess: &Session, hidden: Var) -> Result<Var> {
        let pooled = self.pooling.forward(sess, hidden)?;
        self.classifier.project(sess, pooled)
    }

    /// Mean AAM cross-entropy of a batch, plus the fraction of the batch
    /// that inference logits classify correctly.
    pub fn loss(&self, sess: &Session, frames: Var, targets: &[usize]) -> Result<(Var, f64)> {
        let hidden = encoder::encode(sess, frames, &self.encoder)?;
        self.head_loss(sess, hidden, targets)
    }

    /// [`SpeakerModel::loss`] starting from encoder output.
    pub fn head_loss(&self, sess: &Session, hidden: Var, targets: &[usize]) -> Result<(Var, f64)> {
        let g = sess.graph;
        let x = self.embed_hidden(sess, hidden)?;
        if let Some(&bad) = targets.iter().find(|&&y| y >= self.classifier.n_speakers) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                size: self.classifier.n_speakers,
            });
        }
        let cos = self.classifier.cosines(sess, x)?;
        let correct = {
            let c = g.value_ref(cos);
            c.data()
                .chunks(self.classifier.n_speakers)
                .zip(targets)
                .filter(|(row, &y)| argmax(row) == y)
                .count()
        };
        let logits = g.angular_margin(cos, Some(targets), self.classifier.margin, self.classifier.scale);
        let loss = crate::nn::cross_entropy(g, logits, targets)?;
        Ok((loss, correct as f64 / targets.len() as f64))
    }

    /// Predicted speaker ids from inference logits.
    pub fn predict(&self, sess: &Session, frames: Var) -> Result<Vec<usize>> {
        let x = self.embed(sess, frames)?;
        let logits = self.classifier.logits(sess, x, None)?;
        let lv = sess.graph.value_ref(logits);
        Ok(lv.data().chunks(self.classifier.n_speakers).map(argmax).collect())
    }
}

/// Stacks utterances of equal geometry into a `[B, N, n_mels]` tensor.
pub fn stack_frames(items: &[&LogMelFrames]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    let (n, m) = (first.num_frames(), first.n_mels());
    let mut data = Vec::with_capacity(items.len() * n * m);
    for f in items {
        if f.num_frames() != n || f.n_mels() != m {
            return Err(Error::Shape(format!(
                "batch mixes {}×{} and {n}×{m} utterances",
                f.num_frames(),
                f.n_mels()
            )));
        }
        data.extend_from_slice(f.data.data());
    }
    Ok(Tensor::new(vec![items.len(), n, m], data))
}
