//! Embedding tables, the GRU cell, bidirectional GRUs, the character-level
//! word encoder and the two complete taggers built from them.
//!
//! Parameters are plain tensors; every forward pass registers them on a
//! fresh [`Graph`] and records the computation for one sentence.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::EncodedSentence;
use crate::iob::Tag;
use crate::numerics::{Graph, NodeId, NumericsError, Parameterized, Scalar, Tensor};
use crate::training::dropout_mask;

/// Weight init range for recurrent and projection matrices.
pub const WEIGHT_INIT: f64 = 0.08;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("capability error: {0}")]
    Capability(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    WordOnly,
    CharWord,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::WordOnly => "word-only",
            Variant::CharWord => "char+word",
        })
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "word-only" | "word" => Ok(Variant::WordOnly),
            "char+word" | "char-word" | "charword" => Ok(Variant::CharWord),
            other => Err(ModelError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub word_vocab_size: usize,
    pub char_vocab_size: usize,
    pub word_dim: usize,
    /// Sentence BiGRU output size; each direction gets half.
    pub hidden: usize,
    /// Character embedding size, char GRU size per direction, and size of
    /// the character-level word embedding.
    pub char_dim: usize,
    pub dropout: f64,
    pub seed: u64,
    pub word_emb_trainable: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CharWord,
            word_vocab_size: 2,
            char_vocab_size: 2,
            word_dim: 100,
            hidden: 100,
            char_dim: 100,
            dropout: 0.5,
            seed: 1,
            word_emb_trainable: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.hidden < 2 || !self.hidden.is_multiple_of(2) {
            return bad(format!("hidden size must be even and >= 2, got {}", self.hidden));
        }
        if self.word_dim == 0 || self.char_dim == 0 {
            return bad("embedding dimensions must be >= 1".into());
        }
        if self.word_vocab_size < 2 || self.char_vocab_size < 2 {
            return bad("vocabularies must include the two reserved entries".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Input size of the sentence BiGRU.
    pub fn sentence_input_dim(&self) -> usize {
        match self.variant {
            Variant::WordOnly => self.word_dim,
            Variant::CharWord => self.word_dim + self.char_dim,
        }
    }
}

fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `[dim, vocab]` lookup table.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T: Scalar = f32> {
    pub matrix: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn random<R: Rng>(dim: usize, vocab_size: usize, rng: &mut R) -> Self {
        Self {
            matrix: uniform(rng, &[dim, vocab_size], 0.5 / dim as f64),
            trainable: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.shape()[1]
    }

    fn register<'a>(&'a self, g: &mut Graph<'a, T>, name: &str) -> Result<NodeId, NumericsError> {
        if self.trainable {
            g.param(name, &self.matrix)
        } else {
            Ok(g.constant_ref(&self.matrix))
        }
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingTable<U> {
        EmbeddingTable {
            matrix: self.matrix.cast(),
            trainable: self.trainable,
        }
    }
}

/// Gate and candidate weights of one GRU direction.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<T: Scalar = f32> {
    pub wz: Tensor<T>,
    pub uz: Tensor<T>,
    pub bz: Tensor<T>,
    pub wr: Tensor<T>,
    pub ur: Tensor<T>,
    pub br: Tensor<T>,
    pub wh: Tensor<T>,
    pub uh: Tensor<T>,
    pub bh: Tensor<T>,
}

const GRU_NAMES: [&str; 9] = ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"];

impl<T: Scalar> GruParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            wz: Tensor::zeros(&[hidden, input]),
            uz: Tensor::zeros(&[hidden, hidden]),
            bz: Tensor::zeros(&[hidden]),
            wr: Tensor::zeros(&[hidden, input]),
            ur: Tensor::zeros(&[hidden, hidden]),
            br: Tensor::zeros(&[hidden]),
            wh: Tensor::zeros(&[hidden, input]),
            uh: Tensor::zeros(&[hidden, hidden]),
            bh: Tensor::zeros(&[hidden]),
        }
    }

    pub fn random<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        for t in [&mut p.wz, &mut p.uz, &mut p.wr, &mut p.ur, &mut p.wh, &mut p.uh] {
            *t = uniform(rng, t.shape(), WEIGHT_INIT);
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.bz.len()
    }

    pub fn input(&self) -> usize {
        self.wz.shape()[1]
    }

    fn tensors(&self) -> [&Tensor<T>; 9] {
        [&self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br, &self.wh, &self.uh, &self.bh]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.wz,
            &mut self.uz,
            &mut self.bz,
            &mut self.wr,
            &mut self.ur,
            &mut self.br,
            &mut self.wh,
            &mut self.uh,
            &mut self.bh,
        ]
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (n, t) in GRU_NAMES.iter().zip(self.tensors()) {
            f(&format!("{prefix}.{n}"), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (n, t) in GRU_NAMES.iter().zip(self.tensors_mut()) {
            f(&format!("{prefix}.{n}"), t);
        }
    }

    pub fn register<'a>(&'a self, g: &mut Graph<'a, T>, prefix: &str) -> Result<GruNodes, NumericsError> {
        let mut ids = [None; 9];
        for (slot, (n, t)) in ids.iter_mut().zip(GRU_NAMES.iter().zip(self.tensors())) {
            *slot = Some(g.param(&format!("{prefix}.{n}"), t)?);
        }
        let [wz, uz, bz, wr, ur, br, wh, uh, bh] = ids.map(Option::unwrap);
        Ok(GruNodes {
            wz,
            uz,
            bz,
            wr,
            ur,
            br,
            wh,
            uh,
            bh,
            hidden: self.hidden(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> GruParams<U> {
        GruParams {
            wz: self.wz.cast(),
            uz: self.uz.cast(),
            bz: self.bz.cast(),
            wr: self.wr.cast(),
            ur: self.ur.cast(),
            br: self.br.cast(),
            wh: self.wh.cast(),
            uh: self.uh.cast(),
            bh: self.bh.cast(),
        }
    }
}

/// Graph handles for a registered [`GruParams`].
#[derive(Clone, Copy, Debug)]
pub struct GruNodes {
    pub wz: NodeId,
    pub uz: NodeId,
    pub bz: NodeId,
    pub wr: NodeId,
    pub ur: NodeId,
    pub br: NodeId,
    pub wh: NodeId,
    pub uh: NodeId,
    pub bh: NodeId,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiGruParams<T: Scalar = f32> {
    pub forward: GruParams<T>,
    pub backward: GruParams<T>,
}

impl<T: Scalar> BiGruParams<T> {
    pub fn random<R: Rng>(input: usize, hidden_per_dir: usize, rng: &mut R) -> Self {
        Self {
            forward: GruParams::random(input, hidden_per_dir, rng),
            backward: GruParams::random(input, hidden_per_dir, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden() + self.backward.hidden()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.forward.visit(&format!("{prefix}.fwd"), f);
        self.backward.visit(&format!("{prefix}.bwd"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.forward.visit_mut(&format!("{prefix}.fwd"), f);
        self.backward.visit_mut(&format!("{prefix}.bwd"), f);
    }

    pub fn register<'a>(&'a self, g: &mut Graph<'a, T>, prefix: &str) -> Result<BiGruNodes, NumericsError> {
        Ok(BiGruNodes {
            forward: self.forward.register(g, &format!("{prefix}.fwd"))?,
            backward: self.backward.register(g, &format!("{prefix}.bwd"))?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> BiGruParams<U> {
        BiGruParams {
            forward: self.forward.cast(),
            backward: self.backward.cast(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiGruNodes {
    pub forward: GruNodes,
    pub backward: GruNodes,
}

/// Character embeddings, a character BiGRU, and the linear layer mapping
/// `[last forward state : first backward state]` to a word vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CharWordEncoderParams<T: Scalar = f32> {
    pub char_table: EmbeddingTable<T>,
    pub char_bigru: BiGruParams<T>,
    pub wcw: Tensor<T>,
    pub bcw: Tensor<T>,
}

impl<T: Scalar> CharWordEncoderParams<T> {
    pub fn random<R: Rng>(char_dim: usize, char_vocab: usize, rng: &mut R) -> Self {
        Self {
            char_table: EmbeddingTable::random(char_dim, char_vocab, rng),
            char_bigru: BiGruParams::random(char_dim, char_dim, rng),
            wcw: uniform(rng, &[char_dim, 2 * char_dim], WEIGHT_INIT),
            bcw: Tensor::zeros(&[char_dim]),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.bcw.len()
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f("char.emb", &self.char_table.matrix);
        self.char_bigru.visit("char", f);
        f("char.proj.w", &self.wcw);
        f("char.proj.b", &self.bcw);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("char.emb", &mut self.char_table.matrix);
        self.char_bigru.visit_mut("char", f);
        f("char.proj.w", &mut self.wcw);
        f("char.proj.b", &mut self.bcw);
    }

    pub fn register<'a>(&'a self, g: &mut Graph<'a, T>) -> Result<CharEncoderNodes, NumericsError> {
        Ok(CharEncoderNodes {
            table: self.char_table.register(g, "char.emb")?,
            bigru: self.char_bigru.register(g, "char")?,
            wcw: g.param("char.proj.w", &self.wcw)?,
            bcw: g.param("char.proj.b", &self.bcw)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> CharWordEncoderParams<U> {
        CharWordEncoderParams {
            char_table: self.char_table.cast(),
            char_bigru: self.char_bigru.cast(),
            wcw: self.wcw.cast(),
            bcw: self.bcw.cast(),
        }
    }
}

impl<T: Scalar> Parameterized<T> for CharWordEncoderParams<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.visit(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_mut(f)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CharEncoderNodes {
    pub table: NodeId,
    pub bigru: BiGruNodes,
    pub wcw: NodeId,
    pub bcw: NodeId,
}

/// Affine map from BiGRU states to the three tag scores.
#[derive(Clone, Debug, PartialEq)]
pub struct TagProjectionParams<T: Scalar = f32> {
    pub wtag: Tensor<T>,
    pub btag: Tensor<T>,
}

impl<T: Scalar> TagProjectionParams<T> {
    pub fn random<R: Rng>(input: usize, rng: &mut R) -> Self {
        Self {
            wtag: uniform(rng, &[Tag::COUNT, input], WEIGHT_INIT),
            btag: Tensor::zeros(&[Tag::COUNT]),
        }
    }

    pub fn cast<U: Scalar>(&self) -> TagProjectionParams<U> {
        TagProjectionParams {
            wtag: self.wtag.cast(),
            btag: self.btag.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub word_table: EmbeddingTable<T>,
    pub sentence_bigru: BiGruParams<T>,
    pub tag_proj: TagProjectionParams<T>,
    pub char_encoder: Option<CharWordEncoderParams<T>>,
}

/// Graph handles for a registered [`ModelParams`].
#[derive(Clone, Copy, Debug)]
pub struct ModelNodes {
    pub word_table: NodeId,
    pub sentence_bigru: BiGruNodes,
    pub wtag: NodeId,
    pub btag: NodeId,
    pub char_encoder: Option<CharEncoderNodes>,
}

/// Forward-pass mode. Dropout masks are drawn only in training mode.
pub enum Mode<'r> {
    Infer,
    Train { rate: f64, rng: &'r mut ChaCha8Rng },
}

pub fn embed_lookup<T: Scalar>(g: &mut Graph<'_, T>, table: NodeId, ids: &[usize]) -> Result<Vec<NodeId>, NumericsError> {
    ids.iter().map(|&id| g.lookup(table, id)).collect()
}

/// One GRU update:
///
/// ```text
/// z = sigmoid(Wz x + Uz h + bz)
/// r = sigmoid(Wr x + Ur h + br)
/// g = elu(Wh x + Uh (r * h) + bh)
/// h' = (1 - z) * h + z * g
/// ```
pub fn gru_step<T: Scalar>(g: &mut Graph<'_, T>, p: &GruNodes, x: NodeId, h_prev: NodeId) -> Result<NodeId, NumericsError> {
    let gate = |g: &mut Graph<'_, T>, w: NodeId, u: NodeId, b: NodeId| -> Result<NodeId, NumericsError> {
        let wx = g.matmul(w, x)?;
        let uh = g.matmul(u, h_prev)?;
        let s = g.add(wx, uh)?;
        let s = g.add(s, b)?;
        Ok(g.sigmoid(s))
    };
    let z = gate(g, p.wz, p.uz, p.bz)?;
    let r = gate(g, p.wr, p.ur, p.br)?;

    let wx = g.matmul(p.wh, x)?;
    let rh = g.hadamard(r, h_prev)?;
    let urh = g.matmul(p.uh, rh)?;
    let s = g.add(wx, urh)?;
    let s = g.add(s, p.bh)?;
    let cand = g.elu(s);

    let keep = g.one_minus(z);
    let kept = g.hadamard(keep, h_prev)?;
    let fresh = g.hadamard(z, cand)?;
    g.add(kept, fresh)
}

/// Runs the cell over `xs` from `h0`, returning every hidden state.
pub fn gru_sequence<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &GruNodes,
    xs: &[NodeId],
    h0: NodeId,
) -> Result<Vec<NodeId>, NumericsError> {
    if xs.is_empty() {
        return Err(NumericsError::Contract("GRU over an empty sequence".into()));
    }
    let mut h = h0;
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        h = gru_step(g, p, x, h)?;
        out.push(h);
    }
    Ok(out)
}

/// Forward and backward passes from zero states; the backward states are
/// re-reversed so position `i` holds `[fwd_i : bwd_i]`.
pub fn bigru_states<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &BiGruNodes,
    xs: &[NodeId],
) -> Result<(Vec<NodeId>, Vec<NodeId>), NumericsError> {
    let h0f = g.constant(Tensor::zeros(&[p.forward.hidden]));
    let fwd = gru_sequence(g, &p.forward, xs, h0f)?;
    let rev: Vec<NodeId> = xs.iter().rev().copied().collect();
    let h0b = g.constant(Tensor::zeros(&[p.backward.hidden]));
    let mut bwd = gru_sequence(g, &p.backward, &rev, h0b)?;
    bwd.reverse();
    Ok((fwd, bwd))
}

pub fn bigru<T: Scalar>(g: &mut Graph<'_, T>, p: &BiGruNodes, xs: &[NodeId]) -> Result<Vec<NodeId>, NumericsError> {
    let (fwd, bwd) = bigru_states(g, p, xs)?;
    fwd.into_iter().zip(bwd).map(|(f, b)| g.concat(&[f, b])).collect()
}

/// Character-level word vector `Wcw [fwd_n : bwd_1] + bcw`.
pub fn char_word_embed<T: Scalar>(g: &mut Graph<'_, T>, p: &CharEncoderNodes, chars: &[usize]) -> Result<NodeId, NumericsError> {
    if chars.is_empty() {
        return Err(NumericsError::Contract("character sequence is empty".into()));
    }
    let xs = embed_lookup(g, p.table, chars)?;
    let (fwd, bwd) = bigru_states(g, &p.bigru, &xs)?;
    let last_fwd = *fwd.last().unwrap();
    let first_bwd = bwd[0];
    let state = g.concat(&[last_fwd, first_bwd])?;
    let proj = g.matmul(p.wcw, state)?;
    g.add(proj, p.bcw)
}

fn apply_dropout<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> Result<NodeId, ModelError> {
    let mask = dropout_mask::<T>(&[g.value(x).len()], rate, rng).map_err(|e| ModelError::Config(e.to_string()))?;
    let m = g.constant(mask);
    Ok(g.hadamard(x, m)?)
}

/// Picks the most probable tag; exact ties resolve as O, then I, then B.
pub fn argmax_tag<T: Scalar>(probs: &[T]) -> Tag {
    let mut best = Tag::O;
    for tag in [Tag::I, Tag::B] {
        if probs[tag.index()] > probs[best.index()] {
            best = tag;
        }
    }
    best
}

impl<T: Scalar> ModelParams<T> {
    /// Freshly initialized parameters, seeded from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut word_table = EmbeddingTable::random(config.word_dim, config.word_vocab_size, &mut rng);
        word_table.trainable = config.word_emb_trainable;
        let sentence_bigru = BiGruParams::random(config.sentence_input_dim(), config.hidden / 2, &mut rng);
        let tag_proj = TagProjectionParams::random(config.hidden, &mut rng);
        let char_encoder = match config.variant {
            Variant::WordOnly => None,
            Variant::CharWord => Some(CharWordEncoderParams::random(config.char_dim, config.char_vocab_size, &mut rng)),
        };
        Ok(Self {
            config,
            word_table,
            sentence_bigru,
            tag_proj,
            char_encoder,
        })
    }

    /// Replaces the word table, e.g. with pretrained vectors.
    pub fn set_word_embeddings(&mut self, matrix: Tensor<T>) -> Result<(), ModelError> {
        if matrix.shape() != self.word_table.matrix.shape() {
            return Err(ModelError::Config(format!(
                "word table shape {:?}, expected {:?}",
                matrix.shape(),
                self.word_table.matrix.shape()
            )));
        }
        self.word_table.matrix = matrix;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            word_table: self.word_table.cast(),
            sentence_bigru: self.sentence_bigru.cast(),
            tag_proj: self.tag_proj.cast(),
            char_encoder: self.char_encoder.as_ref().map(CharWordEncoderParams::cast),
        }
    }

    pub fn register<'a>(&'a self, g: &mut Graph<'a, T>) -> Result<ModelNodes, NumericsError> {
        Ok(ModelNodes {
            word_table: self.word_table.register(g, "word.emb")?,
            sentence_bigru: self.sentence_bigru.register(g, "sent")?,
            wtag: g.param("tag.w", &self.tag_proj.wtag)?,
            btag: g.param("tag.b", &self.tag_proj.btag)?,
            char_encoder: match &self.char_encoder {
                Some(c) => Some(c.register(g)?),
                None => None,
            },
        })
    }

    /// Records the forward pass for one sentence and returns the per-word
    /// tag distributions. `dropout` holds the rate and mask source when
    /// training.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_, T>,
        nodes: &ModelNodes,
        word_ids: &[usize],
        char_ids: &[Vec<usize>],
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Vec<NodeId>, ModelError> {
        if word_ids.is_empty() {
            return Err(NumericsError::Contract("empty sentence".into()).into());
        }
        let (rate, mut dropout_rng) = match dropout {
            Some((rate, rng)) => (rate, Some(rng)),
            None => (0.0, None),
        };
        let words = embed_lookup(g, nodes.word_table, word_ids)?;
        let mut inputs = Vec::with_capacity(words.len());
        for (i, &w) in words.iter().enumerate() {
            let mut x = match &nodes.char_encoder {
                Some(enc) => {
                    let chars = char_ids.get(i).ok_or_else(|| {
                        ModelError::Capability(format!("missing character ids for word {i}"))
                    })?;
                    let cw = char_word_embed(g, enc, chars)?;
                    g.concat(&[w, cw])?
                }
                None => w,
            };
            if let Some(rng) = dropout_rng.as_deref_mut() {
                x = apply_dropout(g, x, rate, rng)?;
            }
            inputs.push(x);
        }
        let states = bigru(g, &nodes.sentence_bigru, &inputs)?;
        let mut out = Vec::with_capacity(states.len());
        for mut h in states {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                h = apply_dropout(g, h, rate, rng)?;
            }
            let logits = g.matmul(nodes.wtag, h)?;
            let logits = g.add(logits, nodes.btag)?;
            out.push(g.softmax(logits)?);
        }
        Ok(out)
    }

    /// Tag distributions as an `[n, 3]` tensor (columns I, O, B).
    pub fn model_forward(&self, sentence: &EncodedSentence, mode: Mode<'_>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let nodes = self.register(&mut g)?;
        let rng = match mode {
            Mode::Infer => None,
            Mode::Train { rate, rng } => Some((rate, rng)),
        };
        let qs = self.forward_graph(&mut g, &nodes, &sentence.word_ids, &sentence.char_ids, rng)?;
        let mut data = Vec::with_capacity(qs.len() * Tag::COUNT);
        for q in &qs {
            data.extend_from_slice(g.value(*q).data());
        }
        Ok(Tensor::matrix(qs.len(), Tag::COUNT, data)?)
    }

    pub fn predict_tags(&self, sentence: &EncodedSentence) -> Result<Vec<Tag>, ModelError> {
        let probs = self.model_forward(sentence, Mode::Infer)?;
        Ok((0..probs.shape()[0]).map(|i| argmax_tag(probs.row(i))).collect())
    }

    /// Character-level word vector for one word.
    pub fn char_word_vector(&self, chars: &[usize]) -> Result<Vec<T>, ModelError> {
        let enc = self
            .char_encoder
            .as_ref()
            .ok_or_else(|| ModelError::Capability("word-only model has no character encoder".into()))?;
        let mut g = Graph::new();
        let nodes = enc.register(&mut g)?;
        let out = char_word_embed(&mut g, &nodes, chars)?;
        Ok(g.value(out).data().to_vec())
    }
}

impl<T: Scalar> Parameterized<T> for ModelParams<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f("word.emb", &self.word_table.matrix);
        self.sentence_bigru.visit("sent", f);
        f("tag.w", &self.tag_proj.wtag);
        f("tag.b", &self.tag_proj.btag);
        if let Some(c) = &self.char_encoder {
            c.visit(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("word.emb", &mut self.word_table.matrix);
        self.sentence_bigru.visit_mut("sent", f);
        f("tag.w", &mut self.tag_proj.wtag);
        f("tag.b", &mut self.tag_proj.btag);
        if let Some(c) = &mut self.char_encoder {
            c.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, DEFAULT_EPS};

    fn scalar_gru(v: [f64; 9]) -> GruParams<f64> {
        let t = |x: f64, shape: &[usize]| Tensor::new(shape.to_vec(), vec![x]).unwrap();
        GruParams {
            wz: t(v[0], &[1, 1]),
            uz: t(v[1], &[1, 1]),
            bz: t(v[2], &[1]),
            wr: t(v[3], &[1, 1]),
            ur: t(v[4], &[1, 1]),
            br: t(v[5], &[1]),
            wh: t(v[6], &[1, 1]),
            uh: t(v[7], &[1, 1]),
            bh: t(v[8], &[1]),
        }
    }

    fn run_step(p: &GruParams<f64>, x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let nodes = p.register(&mut g, "gru").unwrap();
        let xi = g.constant(Tensor::vector(x.to_vec()));
        let hi = g.constant(Tensor::vector(h.to_vec()));
        let out = gru_step(&mut g, &nodes, xi, hi).unwrap();
        g.value(out).data().to_vec()
    }

    /// Straight-line scalar evaluation of the four cell equations.
    fn oracle_step(v: [f64; 9], x: f64, h: f64) -> f64 {
        let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
        let elu = |a: f64| if a >= 0.0 { a } else { a.exp() - 1.0 };
        let z = sig(v[0] * x + v[1] * h + v[2]);
        let r = sig(v[3] * x + v[4] * h + v[5]);
        let g = elu(v[6] * x + v[7] * (r * h) + v[8]);
        (1.0 - z) * h + z * g
    }

    #[test]
    fn zero_gru_halves_state() {
        let p = GruParams::<f64>::zeros(1, 1);
        assert_eq!(run_step(&p, &[0.7], &[2.0]), vec![1.0]);
        assert_eq!(run_step(&p, &[0.7], &[0.0]), vec![0.0]);
    }

    #[test]
    fn zero_gru_sequence_is_geometric() {
        let p = GruParams::<f64>::zeros(2, 3);
        let mut g = Graph::new();
        let nodes = p.register(&mut g, "gru").unwrap();
        let h0 = g.constant(Tensor::vector(vec![4.0, -8.0, 1.0]));
        let xs: Vec<NodeId> = (0..4).map(|i| g.constant(Tensor::vector(vec![i as f64, 1.0]))).collect();
        let hs = gru_sequence(&mut g, &nodes, &xs, h0).unwrap();
        for (i, h) in hs.iter().enumerate() {
            let f = 0.5f64.powi(i as i32 + 1);
            assert_eq!(g.value(*h).data(), &[4.0 * f, -8.0 * f, f]);
        }
        let one = gru_sequence(&mut g, &nodes, &xs[..1], h0).unwrap();
        assert_eq!(g.value(one[0]), g.value(hs[0]));
        assert!(matches!(
            gru_sequence(&mut g, &nodes, &[], h0),
            Err(NumericsError::Contract(_))
        ));
    }

    #[test]
    fn gru_step_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let v: [f64; 9] = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
            let x = rng.gen_range(-3.0..3.0);
            let h = rng.gen_range(-3.0..3.0);
            let got = run_step(&scalar_gru(v), &[x], &[h])[0];
            assert!((got - oracle_step(v, x, h)).abs() < 1e-6);
        }
    }

    #[test]
    fn gru_step_rejects_bad_shapes() {
        let p = GruParams::<f64>::zeros(2, 3);
        let mut g = Graph::new();
        let nodes = p.register(&mut g, "gru").unwrap();
        let x = g.constant(Tensor::vector(vec![1.0; 3]));
        let h = g.constant(Tensor::vector(vec![0.0; 3]));
        assert!(matches!(gru_step(&mut g, &nodes, x, h), Err(NumericsError::Shape { .. })));
    }

    #[test]
    fn gru_sequence_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = crate::numerics::ParamStore::new();
        let p = GruParams::<f64>::random(2, 3, &mut rng);
        p.visit("gru", &mut |n, t| store.insert(n, t.map(|v| v * 10.0)));
        let xs: Vec<Tensor<f64>> = (0..5)
            .map(|_| Tensor::vector(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]))
            .collect();
        let report = grad_check(&mut store, DEFAULT_EPS, |s| {
            let get = |n: &str| s.get(&format!("gru.{n}")).unwrap().clone();
            let p = GruParams {
                wz: get("wz"),
                uz: get("uz"),
                bz: get("bz"),
                wr: get("wr"),
                ur: get("ur"),
                br: get("br"),
                wh: get("wh"),
                uh: get("uh"),
                bh: get("bh"),
            };
            let mut g = Graph::new();
            let nodes = p.register(&mut g, "gru")?;
            let h0 = g.constant(Tensor::zeros(&[3]));
            let inputs: Vec<NodeId> = xs.iter().map(|x| g.constant(x.clone())).collect();
            let hs = gru_sequence(&mut g, &nodes, &inputs, h0)?;
            let cat = g.concat(&hs)?;
            let sq = g.hadamard(cat, cat)?;
            let l = g.sum(sq);
            Ok((g.value(l).item()?, g.backward(l)?))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.params.len(), 9);
    }

    fn bigru_outputs(p: &BiGruParams<f64>, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let nodes = p.register(&mut g, "bi").unwrap();
        let inputs: Vec<NodeId> = xs.iter().map(|x| g.constant(Tensor::vector(x.clone()))).collect();
        let out = bigru(&mut g, &nodes, &inputs).unwrap();
        out.iter().map(|o| g.value(*o).data().to_vec()).collect()
    }

    fn sequence_outputs(p: &GruParams<f64>, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let nodes = p.register(&mut g, "uni").unwrap();
        let h0 = g.constant(Tensor::zeros(&[p.hidden()]));
        let inputs: Vec<NodeId> = xs.iter().map(|x| g.constant(Tensor::vector(x.clone()))).collect();
        let out = gru_sequence(&mut g, &nodes, &inputs, h0).unwrap();
        out.iter().map(|o| g.value(*o).data().to_vec()).collect()
    }

    #[test]
    fn bigru_halves_match_unidirectional_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = BiGruParams::<f64>::random(2, 3, &mut rng);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let out = bigru_outputs(&p, &xs);
        assert!(out.iter().all(|o| o.len() == p.output_dim()));
        let fwd = sequence_outputs(&p.forward, &xs);
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut bwd = sequence_outputs(&p.backward, &rev);
        bwd.reverse();
        for i in 0..xs.len() {
            assert_eq!(&out[i][..3], &fwd[i][..]);
            assert_eq!(&out[i][3..], &bwd[i][..]);
        }
    }

    #[test]
    fn bigru_palindrome_is_mirror_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dir = GruParams::<f64>::random(2, 3, &mut rng);
        let p = BiGruParams {
            forward: dir.clone(),
            backward: dir,
        };
        let a = vec![0.3, -0.2];
        let b = vec![-0.9, 0.5];
        let c = vec![0.1, 0.8];
        let xs = vec![a.clone(), b.clone(), c, b, a];
        let out = bigru_outputs(&p, &xs);
        let n = out.len();
        for i in 0..n {
            let mirrored = &out[n - 1 - i];
            assert!((0..3).all(|k| (out[i][k] - mirrored[k + 3]).abs() < 1e-12));
            assert!((0..3).all(|k| (out[i][k + 3] - mirrored[k]).abs() < 1e-12));
        }
    }

    fn encoder(rng: &mut ChaCha8Rng) -> CharWordEncoderParams<f64> {
        CharWordEncoderParams::random(3, 6, rng)
    }

    fn embed(p: &CharWordEncoderParams<f64>, chars: &[usize]) -> Vec<f64> {
        let mut g = Graph::new();
        let nodes = p.register(&mut g).unwrap();
        let out = char_word_embed(&mut g, &nodes, chars).unwrap();
        g.value(out).data().to_vec()
    }

    #[test]
    fn char_encoder_zero_params_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = encoder(&mut rng);
        p.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        assert_eq!(embed(&p, &[2, 3, 4]), vec![0.0; 3]);
        assert_eq!(embed(&p, &[5]), vec![0.0; 3]);
    }

    #[test]
    fn char_encoder_lengths_and_single_char() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = encoder(&mut rng);
        for len in 1..12 {
            let chars: Vec<usize> = (0..len).map(|i| 2 + i % 4).collect();
            assert_eq!(embed(&p, &chars).len(), 3);
        }
        // one character: both final states come from position 0
        let mut g = Graph::new();
        let nodes = p.register(&mut g).unwrap();
        let xs = embed_lookup(&mut g, nodes.table, &[4]).unwrap();
        let (f, b) = bigru_states(&mut g, &nodes.bigru, &xs).unwrap();
        assert_eq!((f.len(), b.len()), (1, 1));
        let mut g2 = Graph::new();
        let nodes2 = p.register(&mut g2).unwrap();
        assert!(matches!(
            char_word_embed(&mut g2, &nodes2, &[]),
            Err(NumericsError::Contract(_))
        ));
        assert!(matches!(
            char_word_embed(&mut g2, &nodes2, &[6]),
            Err(NumericsError::Index { .. })
        ));
    }

    #[test]
    fn char_encoder_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = encoder(&mut rng);
        p.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.8..0.8);
            }
        });
        let report = grad_check(&mut p, DEFAULT_EPS, |p| {
            let mut g = Graph::new();
            let nodes = p.register(&mut g)?;
            let out = char_word_embed(&mut g, &nodes, &[2, 5, 3, 2])?;
            let sq = g.hadamard(out, out)?;
            let l = g.sum(sq);
            Ok((g.value(l).item()?, g.backward(l)?))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn argmax_tie_rules() {
        assert_eq!(argmax_tag(&[0.1, 0.8, 0.1]), Tag::O);
        assert_eq!(argmax_tag(&[1.0 / 3.0; 3]), Tag::O);
        assert_eq!(argmax_tag(&[0.45, 0.1, 0.45]), Tag::I);
        assert_eq!(argmax_tag(&[0.2, 0.3, 0.5]), Tag::B);
    }

    #[test]
    fn config_validation() {
        let ok = ModelConfig {
            word_vocab_size: 10,
            char_vocab_size: 10,
            ..ModelConfig::default()
        };
        assert!(ok.validate().is_ok());
        assert!(ModelConfig { hidden: 5, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { word_vocab_size: 1, ..ok.clone() }.validate().is_err());
        assert_eq!("char+word".parse::<Variant>().unwrap(), Variant::CharWord);
        assert!("lstm".parse::<Variant>().is_err());
    }

    fn small_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            word_vocab_size: 9,
            char_vocab_size: 8,
            word_dim: 4,
            hidden: 6,
            char_dim: 3,
            dropout: 0.5,
            seed: 21,
            word_emb_trainable: true,
        }
    }

    fn probe() -> EncodedSentence {
        EncodedSentence {
            word_ids: vec![2, 5, 1, 8],
            char_ids: vec![vec![2, 3], vec![4], vec![5, 6, 7, 2], vec![3, 3]],
            tags: vec![Tag::O; 4],
        }
    }

    #[test]
    fn forward_rows_are_distributions() {
        for variant in [Variant::WordOnly, Variant::CharWord] {
            let m = ModelParams::<f64>::new(small_config(variant)).unwrap();
            let out = m.model_forward(&probe(), Mode::Infer).unwrap();
            assert_eq!(out.shape(), &[4, 3]);
            for i in 0..4 {
                assert!((out.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            assert_eq!(out, m.model_forward(&probe(), Mode::Infer).unwrap());
            assert_eq!(m.predict_tags(&probe()).unwrap().len(), 4);
        }
    }

    #[test]
    fn word_only_ignores_characters() {
        let m = ModelParams::<f32>::new(small_config(Variant::WordOnly)).unwrap();
        let a = m.model_forward(&probe(), Mode::Infer).unwrap();
        let mut other = probe();
        other.char_ids = vec![vec![7, 7, 7]; 4];
        assert_eq!(a, m.model_forward(&other, Mode::Infer).unwrap());
    }

    #[test]
    fn out_of_range_ids_are_index_errors() {
        let m = ModelParams::<f32>::new(small_config(Variant::CharWord)).unwrap();
        let mut s = probe();
        s.word_ids[0] = 9;
        assert!(matches!(
            m.model_forward(&s, Mode::Infer),
            Err(ModelError::Numerics(NumericsError::Index { .. }))
        ));
        let mut s = probe();
        s.char_ids[1] = vec![8];
        assert!(m.model_forward(&s, Mode::Infer).is_err());
    }

    #[test]
    fn zeroed_char_encoder_matches_zero_padded_word_model() {
        let mut cw = ModelParams::<f64>::new(small_config(Variant::CharWord)).unwrap();
        for name in cw.param_names().into_iter().filter(|n| n.starts_with("char.")) {
            cw.with_param_mut(&name, &mut |t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        }
        let mut wo = ModelParams::<f64>::new(small_config(Variant::WordOnly)).unwrap();
        wo.word_table = cw.word_table.clone();
        wo.tag_proj = cw.tag_proj.clone();
        // word-only input weights are the word columns of the char+word ones
        let word_cols = |t: &Tensor<f64>| {
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            let data = (0..rows).flat_map(|r| t.row(r)[..4].to_vec()).collect();
            assert_eq!(cols, 7);
            Tensor::matrix(rows, 4, data).unwrap()
        };
        for (dst, src) in [
            (&mut wo.sentence_bigru.forward, &cw.sentence_bigru.forward),
            (&mut wo.sentence_bigru.backward, &cw.sentence_bigru.backward),
        ] {
            *dst = src.clone();
            dst.wz = word_cols(&src.wz);
            dst.wr = word_cols(&src.wr);
            dst.wh = word_cols(&src.wh);
        }
        let a = cw.model_forward(&probe(), Mode::Infer).unwrap();
        let b = wo.model_forward(&probe(), Mode::Infer).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let m = ModelParams::<f32>::new(small_config(Variant::CharWord)).unwrap();
        let infer = m.model_forward(&probe(), Mode::Infer).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zero_rate = m.model_forward(&probe(), Mode::Train { rate: 0.0, rng: &mut rng }).unwrap();
        assert_eq!(infer, zero_rate);
        let dropped = m.model_forward(&probe(), Mode::Train { rate: 0.5, rng: &mut rng }).unwrap();
        assert_ne!(infer, dropped);
    }

    #[test]
    fn parameter_names_and_shapes() {
        let m = ModelParams::<f32>::new(small_config(Variant::CharWord)).unwrap();
        let names = m.param_names();
        assert_eq!(names.len(), 1 + 18 + 2 + 1 + 18 + 2);
        assert_eq!(names[0], "word.emb");
        assert!(names.contains(&"char.proj.w".to_string()));
        assert_eq!(m.sentence_bigru.forward.input(), 7);
        assert_eq!(m.sentence_bigru.forward.hidden(), 3);
        assert_eq!(m.char_encoder.as_ref().unwrap().wcw.shape(), &[3, 6]);
        let wo = ModelParams::<f32>::new(small_config(Variant::WordOnly)).unwrap();
        assert!(wo.char_encoder.is_none());
        assert!(wo.char_word_vector(&[2]).is_err());
        let bound = 0.5 / 4.0;
        assert!(m.word_table.matrix.data().iter().all(|v| v.abs() <= bound));
        assert!(m.tag_proj.wtag.data().iter().all(|v| v.abs() <= 0.08));
        assert!(m.tag_proj.btag.data().iter().all(|&v| v == 0.0));
    }
}
