//! Opinion target extraction with bidirectional GRU taggers over word
//! embeddings and character-level word embeddings.
//!
//! The crate is organised bottom-up: [`numerics`] (tensors and reverse-mode
//! autodiff), [`layers`] (GRU cells and the two tagger variants), [`iob`]
//! (tag codec), [`data`] (corpora, vocabularies, embeddings), [`training`],
//! [`evaluation`] and [`model_io`].

pub mod data;
pub mod evaluation;
pub mod iob;
pub mod layers;
pub mod model_io;
pub mod numerics;
pub mod pipeline;
pub mod synthetic;
pub mod training;

pub use data::{Corpus, DataError, EncodedSentence, Sentence, Split, Vocab, VocabKind};
pub use evaluation::{EvalError, SubsetSpec, PRF};
pub use iob::{IobError, Tag, TokenSpan};
pub use layers::{ModelConfig, ModelError, ModelParams, Variant};
pub use model_io::{ModelIoError, SavedModel};
pub use numerics::{Gradients, NumericsError, Parameterized, Scalar, Tensor};
pub use training::{TrainConfig, TrainError, TrainReport};

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Iob(#[from] IobError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    ModelIo(#[from] ModelIoError),
}
