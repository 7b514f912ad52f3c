//! Fixtures shared by the criterion benches.

use ote_core::data::EncodedSentence;
use ote_core::{ModelConfig, ModelParams, Tag, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORD_VOCAB: usize = 5000;
pub const CHAR_VOCAB: usize = 80;

/// A model of the given variant at the default dimensions.
pub fn model(variant: Variant, hidden: usize, char_dim: usize) -> ModelParams<f32> {
    ModelParams::new(ModelConfig {
        variant,
        word_vocab_size: WORD_VOCAB,
        char_vocab_size: CHAR_VOCAB,
        word_dim: 100,
        hidden,
        char_dim,
        dropout: 0.5,
        seed: 7,
        word_emb_trainable: true,
    })
    .expect("valid config")
}

/// Random encoded sentences of `len` words with 3 to 9 characters each.
pub fn sentences(n: usize, len: usize, seed: u64) -> Vec<EncodedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| EncodedSentence {
            word_ids: (0..len).map(|_| rng.gen_range(2..WORD_VOCAB)).collect(),
            char_ids: (0..len)
                .map(|_| {
                    let k = rng.gen_range(3..10);
                    (0..k).map(|_| rng.gen_range(2..CHAR_VOCAB)).collect()
                })
                .collect(),
            tags: (0..len).map(|_| if rng.gen_bool(0.2) { Tag::I } else { Tag::O }).collect(),
        })
        .collect()
}
