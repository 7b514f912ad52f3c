//! Seeded synthetic corpora and fixtures used by self-checks, tests and
//! benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Corpus, EncodedSentence, Sentence, Split};
use crate::evaluation::DEFAULT_SUFFIXES;
use crate::iob::{Tag, TokenSpan};
use crate::layers::{ModelConfig, ModelParams, Variant};
use crate::numerics::Parameterized;

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn random_word<R: Rng>(rng: &mut R, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| LETTERS[rng.gen_range(0..LETTERS.len())] as char).collect()
}

fn has_suffix(word: &str, suffixes: &[&str]) -> bool {
    suffixes.iter().any(|s| word.ends_with(s))
}

/// Picks `k` pairwise non-adjacent positions in `0..n`.
fn spread_positions<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    loop {
        let mut pos: Vec<usize> = (0..n).collect();
        pos.shuffle(rng);
        let mut chosen: Vec<usize> = pos[..k].to_vec();
        chosen.sort_unstable();
        if chosen.windows(2).all(|w| w[1] > w[0] + 1) {
            return chosen;
        }
    }
}

/// `n` sentences of 5 to 12 random words, each with one or two planted
/// target phrases of one to three words drawn from a fixed phrase list.
pub fn planted_corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers: Vec<String> = (0..150).map(|_| random_word(&mut rng, 2, 8)).collect();
    let phrases: Vec<Vec<String>> = (0..30)
        .map(|_| {
            let len = rng.gen_range(1..=3);
            (0..len).map(|_| random_word(&mut rng, 3, 9)).collect()
        })
        .collect();
    let sentences = (0..n)
        .map(|i| {
            let targets = rng.gen_range(1..=2);
            let picked: Vec<&Vec<String>> = (0..targets).map(|_| phrases.choose(&mut rng).unwrap()).collect();
            let planted: usize = picked.iter().map(|p| p.len()).sum();
            let total = rng.gen_range(5.max(planted + targets)..=12.max(planted + targets));
            let fill = total - planted;
            // slots between filler words; distinct slots keep phrases apart
            let mut slots: Vec<usize> = (0..=fill).collect();
            slots.shuffle(&mut rng);
            let mut slots: Vec<usize> = slots[..targets].to_vec();
            slots.sort_unstable();
            let mut words = Vec::with_capacity(total);
            let mut spans = Vec::new();
            let mut next = 0;
            for f in 0..=fill {
                while next < slots.len() && slots[next] == f {
                    let start = words.len();
                    words.extend(picked[next].iter().cloned());
                    spans.push(TokenSpan::new(start, words.len() - 1));
                    next += 1;
                }
                if f < fill {
                    words.push(fillers.choose(&mut rng).unwrap().clone());
                }
            }
            Sentence::from_tokens(format!("p{i}"), &words, spans)
        })
        .collect();
    Corpus::new(sentences, Split::Train).expect("generated spans are valid")
}

/// Stem pools for the suffix corpus: training and test stems are disjoint.
pub struct SuffixStems {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub fn suffix_stems(seed: u64, per_split: usize) -> SuffixStems {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut draw = |rng: &mut ChaCha8Rng| loop {
        let s = random_word(rng, 3, 6);
        if seen.insert(s.clone()) {
            return s;
        }
    };
    let train = (0..per_split).map(|_| draw(&mut rng)).collect();
    let test = (0..per_split).map(|_| draw(&mut rng)).collect();
    SuffixStems { train, test }
}

/// Sentences of 5 to 12 words in which exactly the words ending in one of
/// the six default suffixes are (single-word) targets. Distractor words
/// never end in any of those suffixes.
pub fn suffix_corpus(n: usize, stems: &[String], seed: u64, split: Split) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let distractor = |rng: &mut ChaCha8Rng| loop {
        let w = random_word(rng, 3, 9);
        if !has_suffix(&w, &DEFAULT_SUFFIXES) {
            return w;
        }
    };
    let sentences = (0..n)
        .map(|i| {
            let len = rng.gen_range(5..=12);
            let targets = rng.gen_range(1..=2);
            let positions = spread_positions(&mut rng, len, targets);
            let mut words = Vec::with_capacity(len);
            for p in 0..len {
                if positions.contains(&p) {
                    let stem = stems.choose(&mut rng).unwrap();
                    let suffix = DEFAULT_SUFFIXES.choose(&mut rng).unwrap();
                    words.push(format!("{stem}{suffix}"));
                } else {
                    words.push(distractor(&mut rng));
                }
            }
            let spans = positions.iter().map(|&p| TokenSpan::new(p, p)).collect();
            Sentence::from_tokens(format!("x{i}"), &words, spans)
        })
        .collect();
    Corpus::new(sentences, split).expect("generated spans are valid")
}

/// A small 64-bit model with every parameter drawn from U(-0.5, 0.5), and a
/// two-sentence batch exercising I, O and B targets.
pub fn gradcheck_fixture(variant: Variant, seed: u64) -> (ModelParams<f64>, Vec<EncodedSentence>) {
    let mut m = ModelParams::<f64>::new(ModelConfig {
        variant,
        word_vocab_size: 6,
        char_vocab_size: 7,
        word_dim: 3,
        hidden: 4,
        char_dim: 3,
        dropout: 0.0,
        seed,
        word_emb_trainable: true,
    })
    .expect("valid fixture config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_params_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5)));
    let batch = vec![
        EncodedSentence {
            word_ids: vec![2, 3, 4],
            char_ids: vec![vec![2, 3], vec![4], vec![5, 6, 2]],
            tags: vec![Tag::O, Tag::I, Tag::O],
        },
        EncodedSentence {
            word_ids: vec![5, 2, 3, 1],
            char_ids: vec![vec![6, 5, 4], vec![3, 3], vec![2], vec![1, 4]],
            tags: vec![Tag::I, Tag::I, Tag::B, Tag::O],
        },
    ];
    (m, batch)
}
