//! Corpus-to-model glue shared by the command-line tool and the tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{build_vocab, encode_corpus, load_embeddings, Corpus, EncodedSentence, Vocab, VocabKind};
use crate::layers::{ModelConfig, ModelParams};
use crate::model_io::SavedModel;
use crate::training::{train, train_with_validation, TrainConfig, TrainReport};
use crate::Error;

/// Word vocabulary of the `max_words` most frequent words plus every
/// character seen in the corpus.
pub fn build_vocabularies(corpus: &Corpus, max_words: usize) -> Result<(Vocab, Vocab), Error> {
    let words = build_vocab(&corpus.sentences, VocabKind::Word, max_words)?;
    let chars = build_vocab(&corpus.sentences, VocabKind::Char, usize::MAX)?;
    Ok((words, chars))
}

/// Fresh model whose vocabulary sizes match `words` and `chars`, with the
/// word table optionally read from a text embedding file.
pub fn init_model(
    mut config: ModelConfig,
    words: &Vocab,
    chars: &Vocab,
    embeddings: Option<&std::path::Path>,
) -> Result<ModelParams<f32>, Error> {
    config.word_vocab_size = words.len();
    config.char_vocab_size = chars.len();
    let mut model = ModelParams::new(config)?;
    if let Some(path) = embeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        let loaded = load_embeddings(path, words, model.config.word_dim, &mut rng)?;
        log::info!("{}: {:.1}% of the vocabulary covered", path.display(), 100.0 * loaded.coverage);
        model.set_word_embeddings(loaded.matrix)?;
    }
    Ok(model)
}

pub fn encode(corpus: &Corpus, words: &Vocab, chars: &Vocab) -> Result<Vec<EncodedSentence>, Error> {
    Ok(encode_corpus(corpus, words, chars)?)
}

/// Encodes `corpus`, trains with the seeded train/validation split and
/// packages the best snapshot with its vocabularies.
pub fn fit(
    corpus: &Corpus,
    words: Vocab,
    chars: Vocab,
    model: ModelParams<f32>,
    cfg: &TrainConfig,
) -> Result<(SavedModel, TrainReport), Error> {
    let data = encode(corpus, &words, &chars)?;
    let (params, report) = train(model, &data, cfg)?;
    Ok((SavedModel { params, words, chars }, report))
}

/// Like [`fit`] but scores `validation` instead of splitting `corpus`.
pub fn fit_with_validation(
    corpus: &Corpus,
    validation: &Corpus,
    words: Vocab,
    chars: Vocab,
    model: ModelParams<f32>,
    cfg: &TrainConfig,
) -> Result<(SavedModel, TrainReport), Error> {
    let data = encode(corpus, &words, &chars)?;
    let val = encode(validation, &words, &chars)?;
    let (params, report) = train_with_validation(model, &data, &val, cfg)?;
    Ok((SavedModel { params, words, chars }, report))
}
