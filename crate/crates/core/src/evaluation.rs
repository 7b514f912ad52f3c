//! Exact-match span scoring, OOV and multi-word subsets, embedding-space
//! analyses (nearest neighbors, suffix groups, exports, PCA).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{encode_sentence, Corpus, DataError, Sentence, Vocab};
use crate::iob::{decode, TokenSpan};
use crate::layers::{ModelError, ModelParams};
use crate::numerics::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Validation(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Micro-averaged precision, recall and F1 with the underlying counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PRF {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PRF {
    /// Precision (recall) is 0 when nothing was predicted (expected).
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

fn count_matches(gold: &[TokenSpan], pred: &[TokenSpan]) -> (usize, usize, usize) {
    let g: BTreeSet<&TokenSpan> = gold.iter().collect();
    let p: BTreeSet<&TokenSpan> = pred.iter().collect();
    let tp = p.intersection(&g).count();
    (tp, p.len() - tp, g.len() - tp)
}

/// Scores span sets aligned by position.
pub fn prf_from_spans(gold: &[Vec<TokenSpan>], pred: &[Vec<TokenSpan>]) -> PRF {
    assert_eq!(gold.len(), pred.len(), "gold and predicted sentence counts differ");
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let (a, b, c) = count_matches(g, p);
        tp += a;
        fp += b;
        fn_ += c;
    }
    PRF::from_counts(tp, fp, fn_)
}

/// Exact-match scoring of per-sentence span sets keyed by sentence id. Both
/// sides must cover the same ids.
pub fn exact_match_prf(gold: &[(String, Vec<TokenSpan>)], pred: &[(String, Vec<TokenSpan>)]) -> Result<PRF, EvalError> {
    let index = |side: &str, xs: &[(String, Vec<TokenSpan>)]| -> Result<BTreeMap<String, usize>, EvalError> {
        let mut m = BTreeMap::new();
        for (i, (id, _)) in xs.iter().enumerate() {
            if m.insert(id.clone(), i).is_some() {
                return Err(EvalError::Validation(format!("duplicate {side} sentence id {id:?}")));
            }
        }
        Ok(m)
    };
    let gi = index("gold", gold)?;
    let pi = index("predicted", pred)?;
    if let Some(id) = gi.keys().find(|k| !pi.contains_key(*k)) {
        return Err(EvalError::Validation(format!("sentence {id:?} has no prediction")));
    }
    if let Some(id) = pi.keys().find(|k| !gi.contains_key(*k)) {
        return Err(EvalError::Validation(format!("prediction for unknown sentence {id:?}")));
    }
    let (g, p): (Vec<Vec<TokenSpan>>, Vec<Vec<TokenSpan>>) = gi
        .iter()
        .map(|(id, &i)| (gold[i].1.clone(), pred[pi[id]].1.clone()))
        .unzip();
    Ok(prf_from_spans(&g, &p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubsetSpec {
    All,
    NoOov,
    OovSentence,
    OovOpinion,
    /// Sentences with a gold span of at least `k` tokens.
    Multiword(usize),
}

impl SubsetSpec {
    /// The seven subsets reported by `eval`.
    pub fn standard() -> Vec<SubsetSpec> {
        vec![
            SubsetSpec::All,
            SubsetSpec::NoOov,
            SubsetSpec::OovSentence,
            SubsetSpec::OovOpinion,
            SubsetSpec::Multiword(2),
            SubsetSpec::Multiword(3),
            SubsetSpec::Multiword(4),
        ]
    }
}

impl fmt::Display for SubsetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubsetSpec::All => f.write_str("all"),
            SubsetSpec::NoOov => f.write_str("no_oov"),
            SubsetSpec::OovSentence => f.write_str("oov_sentence"),
            SubsetSpec::OovOpinion => f.write_str("oov_opinion"),
            SubsetSpec::Multiword(k) => write!(f, "multiword_{k}"),
        }
    }
}

impl FromStr for SubsetSpec {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "all" => SubsetSpec::All,
            "no_oov" => SubsetSpec::NoOov,
            "oov_sentence" => SubsetSpec::OovSentence,
            "oov_opinion" => SubsetSpec::OovOpinion,
            other => {
                let k = other
                    .strip_prefix("multiword_")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| EvalError::Validation(format!("unknown subset {other:?}")))?;
                if k < 2 {
                    return Err(EvalError::Validation(format!("multiword k must be >= 2, got {k}")));
                }
                SubsetSpec::Multiword(k)
            }
        })
    }
}

fn in_subset(s: &Sentence, wv: &Vocab, spec: SubsetSpec) -> bool {
    let unknown = |i: usize| !wv.contains(&s.tokens[i].text);
    match spec {
        SubsetSpec::All => true,
        SubsetSpec::NoOov => !(0..s.len()).any(unknown),
        SubsetSpec::OovSentence => (0..s.len()).any(unknown),
        SubsetSpec::OovOpinion => s.gold_spans.iter().any(|sp| (sp.start..=sp.end).any(unknown)),
        SubsetSpec::Multiword(k) => s.gold_spans.iter().any(|sp| sp.len() >= k),
    }
}

/// Indices of the corpus sentences belonging to `spec`.
pub fn subset_filter(corpus: &Corpus, wv: &Vocab, spec: SubsetSpec) -> Vec<usize> {
    corpus
        .sentences
        .iter()
        .enumerate()
        .filter(|(_, s)| in_subset(s, wv, spec))
        .map(|(i, _)| i)
        .collect()
}

/// Predicted spans for every sentence; empty sentences yield no spans.
pub fn predict_corpus<T: Scalar>(
    m: &ModelParams<T>,
    corpus: &Corpus,
    wv: &Vocab,
    cv: &Vocab,
) -> Result<Vec<Vec<TokenSpan>>, EvalError> {
    corpus
        .sentences
        .par_iter()
        .map(|s| {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            let enc = encode_sentence(s, wv, cv)?;
            Ok(decode(&m.predict_tags(&enc)?))
        })
        .collect()
}

/// Scores precomputed predictions on each requested subset.
pub fn score_subsets(corpus: &Corpus, wv: &Vocab, pred: &[Vec<TokenSpan>], specs: &[SubsetSpec]) -> Vec<(SubsetSpec, PRF)> {
    specs
        .iter()
        .map(|&spec| {
            let idx = subset_filter(corpus, wv, spec);
            let gold: Vec<Vec<TokenSpan>> = idx.iter().map(|&i| corpus.sentences[i].gold_spans.clone()).collect();
            let p: Vec<Vec<TokenSpan>> = idx.iter().map(|&i| pred[i].clone()).collect();
            (spec, prf_from_spans(&gold, &p))
        })
        .collect()
}

pub fn evaluate<T: Scalar>(
    m: &ModelParams<T>,
    corpus: &Corpus,
    wv: &Vocab,
    cv: &Vocab,
    specs: &[SubsetSpec],
) -> Result<Vec<(SubsetSpec, PRF)>, EvalError> {
    let pred = predict_corpus(m, corpus, wv, cv)?;
    Ok(score_subsets(corpus, wv, &pred, specs))
}

/// `subset<TAB>metric<TAB>value` lines, values to 4 decimals.
pub fn format_metrics(table: &[(SubsetSpec, PRF)]) -> String {
    let mut out = String::new();
    for (spec, prf) in table {
        for (name, v) in [("precision", prf.precision), ("recall", prf.recall), ("f1", prf.f1)] {
            out.push_str(&format!("{spec}\t{name}\t{v:.4}\n"));
        }
    }
    out
}

/// Like [`format_metrics`] with a second model's value and the difference
/// `other - value` appended.
pub fn format_metrics_delta(table: &[(SubsetSpec, PRF)], other: &[(SubsetSpec, PRF)]) -> String {
    let mut out = String::new();
    for ((spec, a), (_, b)) in table.iter().zip(other) {
        for (name, x, y) in [
            ("precision", a.precision, b.precision),
            ("recall", a.recall, b.recall),
            ("f1", a.f1, b.f1),
        ] {
            out.push_str(&format!("{spec}\t{name}\t{x:.4}\t{y:.4}\t{:+.4}\n", y - x));
        }
    }
    out
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The `k` tokens most cosine-similar to `query`, excluding the query
/// itself; ties go to the lexicographically smaller token.
pub fn nearest_neighbors(embeddings: &[(String, Vec<f32>)], query: &str, k: usize) -> Result<Vec<(String, f64)>, EvalError> {
    if k == 0 {
        return Err(EvalError::Validation("k must be >= 1".into()));
    }
    let q = embeddings
        .iter()
        .find(|(t, _)| t == query)
        .ok_or_else(|| EvalError::UnknownToken(query.to_string()))?;
    let mut scored: Vec<(String, f64)> = embeddings
        .iter()
        .filter(|(t, _)| t != query)
        .map(|(t, v)| (t.clone(), cosine(&q.1, v)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

pub const DEFAULT_SUFFIXES: [&str; 6] = ["ing", "ly", "able", "ish", "less", "ize"];
/// How many of the most frequent words are scanned for suffixes.
pub const SUFFIX_TOP_WORDS: usize = 2000;

/// Labels each of the first 2000 `tokens` (frequency ranked) with the longest
/// suffix it ends in, e.g. `-ly`. Tokens no longer than the suffix, or
/// matching none, are left out. Order follows `tokens`.
pub fn suffix_groups<S: AsRef<str>>(tokens: &[S], suffixes: &[S]) -> Vec<(String, String)> {
    let mut suf: Vec<&str> = suffixes.iter().map(|s| s.as_ref().trim_start_matches('-')).filter(|s| !s.is_empty()).collect();
    suf.sort_by(|a, b| b.chars().count().cmp(&a.chars().count()).then(a.cmp(b)));
    tokens
        .iter()
        .take(SUFFIX_TOP_WORDS)
        .filter_map(|t| {
            let t = t.as_ref();
            suf.iter()
                .find(|s| t.ends_with(**s) && t.chars().count() > s.chars().count())
                .map(|s| (t.to_string(), format!("-{s}")))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    Word,
    CharWord,
}

impl FromStr for EmbeddingSource {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "word" => Ok(EmbeddingSource::Word),
            "charword" | "char" => Ok(EmbeddingSource::CharWord),
            other => Err(EvalError::Validation(format!("unknown embedding source {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportRow {
    pub token: String,
    pub label: Option<String>,
    pub vector: Vec<f32>,
}

/// One vector per token, read from the word table or computed by the
/// character encoder.
pub fn export_embeddings<T: Scalar>(
    m: &ModelParams<T>,
    wv: &Vocab,
    cv: &Vocab,
    tokens: &[(String, Option<String>)],
    source: EmbeddingSource,
) -> Result<Vec<ExportRow>, EvalError> {
    if source == EmbeddingSource::CharWord && m.char_encoder.is_none() {
        return Err(ModelError::Capability("character-level export needs a char+word model".into()).into());
    }
    tokens
        .iter()
        .map(|(token, label)| {
            let vector: Vec<f32> = match source {
                EmbeddingSource::Word => m.word_table.matrix.column(wv.id(token)).iter().map(|v| v.as_f64() as f32).collect(),
                EmbeddingSource::CharWord => {
                    let chars: Vec<usize> = token.chars().map(|c| cv.char_id(c)).collect();
                    m.char_word_vector(&chars)?.iter().map(|v| v.as_f64() as f32).collect()
                }
            };
            Ok(ExportRow {
                token: token.clone(),
                label: label.clone(),
                vector,
            })
        })
        .collect()
}

/// Writes `token[<TAB>label]<TAB>d0..` rows under a header line.
pub fn write_export<W: Write>(rows: &[ExportRow], mut w: W) -> Result<(), EvalError> {
    let labeled = rows.iter().any(|r| r.label.is_some());
    let dim = rows.first().map_or(0, |r| r.vector.len());
    let mut header = vec!["token".to_string()];
    if labeled {
        header.push("label".into());
    }
    header.extend((0..dim).map(|i| format!("d{i}")));
    writeln!(w, "{}", header.join("\t"))?;
    for r in rows {
        let mut fields = vec![r.token.clone()];
        if labeled {
            fields.push(r.label.clone().unwrap_or_default());
        }
        fields.extend(r.vector.iter().map(|v| v.to_string()));
        writeln!(w, "{}", fields.join("\t"))?;
    }
    Ok(())
}

/// Parses the output of [`write_export`].
pub fn read_export<R: BufRead>(r: R) -> Result<Vec<ExportRow>, EvalError> {
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Ok(Vec::new()),
    };
    let labeled = header.split('\t').nth(1) == Some("label");
    let skip = if labeled { 2 } else { 1 };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < skip {
            return Err(DataError::Format {
                line: i + 2,
                message: "missing columns".into(),
            }
            .into());
        }
        let vector = fields[skip..]
            .iter()
            .map(|v| v.parse::<f32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DataError::Format {
                line: i + 2,
                message: e.to_string(),
            })?;
        rows.push(ExportRow {
            token: fields[0].to_string(),
            label: labeled.then(|| fields[1].to_string()),
            vector,
        });
    }
    Ok(rows)
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITER: usize = 1000;

fn mat_vec(c: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    c.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], against: &[Vec<f64>]) {
    for u in against {
        let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
    }
}

/// Power iteration kept orthogonal to the directions already found.
fn top_eigenvector(c: &[Vec<f64>], found: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = c.len();
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    orthogonalize(&mut v, found);
    normalize(&mut v);
    for _ in 0..PCA_MAX_ITER {
        let mut next = mat_vec(c, &v);
        orthogonalize(&mut next, found);
        if normalize(&mut next) == 0.0 {
            return v;
        }
        let diff: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = next;
        if diff < PCA_TOL {
            break;
        }
    }
    v
}

/// Mean-centered projection onto the two leading principal directions,
/// found by power iteration with deflation. Each output column is signed so
/// that its first clearly nonzero entry is positive.
pub fn pca_project(vectors: &[Vec<f64>]) -> Result<Vec<[f64; 2]>, EvalError> {
    let n = vectors.len();
    if n < 2 {
        return Err(EvalError::Validation(format!("PCA needs at least 2 points, got {n}")));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(EvalError::Validation("PCA input rows differ in length".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for x in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += x[i] * x[j] / n as f64;
            }
        }
    }
    let total: f64 = (0..d).map(|i| cov[i][i]).sum();
    if !(total > 1e-12) {
        return Err(EvalError::Validation("PCA input has zero variance".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut coords = vec![[0.0; 2]; n];
    let mut found: Vec<Vec<f64>> = Vec::new();
    for k in 0..2 {
        let v = top_eigenvector(&cov, &found, &mut rng);
        let lambda: f64 = mat_vec(&cov, &v).iter().zip(&v).map(|(a, b)| a * b).sum();
        for (c, x) in coords.iter_mut().zip(&centered) {
            c[k] = x.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let scale = coords.iter().map(|c| c[k].abs()).fold(0.0, f64::max);
        if let Some(first) = coords.iter().map(|c| c[k]).find(|x| x.abs() > 1e-9 * scale.max(1.0)) {
            if first < 0.0 {
                coords.iter_mut().for_each(|c| c[k] = -c[k]);
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        found.push(v);
    }
    Ok(coords)
}
