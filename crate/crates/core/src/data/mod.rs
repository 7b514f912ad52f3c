//! Corpus ingestion, tokenization, vocabularies, pretrained vectors and
//! batching.

mod corpus;
mod embeddings;
mod tokenize;
mod vocab;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::iob::Tag;

pub use corpus::{
    parse_conll, parse_conll_str, parse_plain_text, parse_semeval_str, parse_semeval_xml, write_conll, Corpus,
    CorpusStats, Sentence, Split,
};
pub use embeddings::{embeddings_for_vocab, load_embeddings, random_table, LoadedEmbeddings, PretrainedEmbeddings};
pub use tokenize::{align_spans, tokenize, Alignment, CharSpan, Token};
pub use vocab::{build_vocab, Vocab, VocabKind, PAD, PAD_SYMBOL, UNK, UNK_SYMBOL};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("XML parse error: {0}")]
    Xml(String),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("invalid data: {0}")]
    Validation(String),
}

pub(crate) fn read_to_string(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Model-ready form of a sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub word_ids: Vec<usize>,
    /// Character ids per word, from the original (cased) token text.
    pub char_ids: Vec<Vec<usize>>,
    pub tags: Vec<Tag>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }
}

pub fn encode_sentence(s: &Sentence, words: &Vocab, chars: &Vocab) -> Result<EncodedSentence, DataError> {
    Ok(EncodedSentence {
        word_ids: s.tokens.iter().map(|t| words.id(&t.text)).collect(),
        char_ids: s
            .tokens
            .iter()
            .map(|t| t.text.chars().map(|c| chars.char_id(c)).collect())
            .collect(),
        tags: s.gold_tags()?,
    })
}

/// Encodes every non-empty sentence of a corpus.
pub fn encode_corpus(corpus: &Corpus, words: &Vocab, chars: &Vocab) -> Result<Vec<EncodedSentence>, DataError> {
    corpus
        .sentences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| encode_sentence(s, words, chars))
        .collect()
}

/// Seeded shuffle of `0..n` for one epoch, cut into groups of at most `size`.
/// Each epoch draws from its own ChaCha stream.
pub fn batches(n: usize, size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(size >= 1, "batch size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}
