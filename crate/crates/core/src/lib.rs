//! Speaker identification with a Conformer encoder, BEST-RQ self-supervised
//! pre-training, Temporal Gate Pooling and an AAM-Softmax classifier.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`autograd`]) over `f64` tensors so every layer can be checked against
//! central finite differences ([`train::gradcheck`]).
//!
//! Pipeline, front to back:
//!
//! * [`frontend`]: WAVE loading, fixed-length cropping/tiling, 80-channel
//!   log-mel features and per-utterance normalization.
//! * [`encoder`]: convolutional 4× subsampling followed by Conformer layers
//!   with relative-position self-attention.
//! * [`pooling`]: Temporal Gate Pooling plus the statistical and
//!   self-attentive baselines.
//! * [`classifier`]: fully connected projection and additive angular margin
//!   logits.
//! * [`bestrq`]: span masking, the frozen random-projection quantizer and the
//!   masked-prediction loss.
//! * [`train`]: AdamW, the warmup/cosine schedule, checkpoints and the
//!   pre-training / fine-tuning loops.
//! * [`corpus`]: JSON-lines manifests, batching and a synthetic multi-speaker
//!   corpus generator.
//! * [`config`]: the JSON run configuration shared by the CLI and the loops.

pub mod autograd;
pub mod bestrq;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod encoder;
mod error;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod params;
pub mod pooling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

// Keeps the guide's snippets compiling against the current API.
macro_rules! book_chapters {
    ($($name:ident => $file:literal),* $(,)?) => {
        $(
            #[cfg(doctest)]
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            mod $name {}
        )*
    };
}

book_chapters! {
    book_introduction => "introduction.md",
    book_features => "features.md",
    book_encoder => "encoder.md",
    book_pooling => "pooling.md",
    book_classifier => "classifier.md",
    book_pretraining => "pretraining.md",
    book_training => "training.md",
    book_gradcheck => "gradcheck.md",
    book_cli => "cli.md",
}

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}
