//! Cross-validated hyperparameter grid.

use std::fmt;
use std::str::FromStr;

use anyhow::Result;
use ote_core::training::cross_validate;
use ote_core::{Corpus, ModelConfig, TrainConfig, Variant};

/// A comma-separated list of positive sizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct List(pub Vec<usize>);

pub fn parse_list(s: &str) -> Result<List, String> {
    let v = s
        .split(',')
        .map(|x| match usize::from_str(x.trim()) {
            Ok(0) | Err(_) => Err(format!("expected a comma-separated list of positive integers, got {x:?}")),
            Ok(n) => Ok(n),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(List(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Point {
    pub vocab: usize,
    pub hidden: usize,
    /// `None` for word-only models.
    pub char_dim: Option<usize>,
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.char_dim {
            Some(d) => write!(f, "{}\t{}\t{}", self.vocab, self.hidden, d),
            None => write!(f, "{}\t{}\t-", self.vocab, self.hidden),
        }
    }
}

/// Every combination, in vocab-major order. Word-only models have no
/// character dimension, so that axis collapses.
pub fn enumerate(variant: Variant, vocab: &List, hidden: &List, char_dim: &List) -> Vec<Point> {
    let dims: Vec<Option<usize>> = match variant {
        Variant::WordOnly => vec![None],
        Variant::CharWord => char_dim.0.iter().copied().map(Some).collect(),
    };
    let mut out = Vec::new();
    for &v in &vocab.0 {
        for &h in &hidden.0 {
            for &d in &dims {
                out.push(Point {
                    vocab: v,
                    hidden: h,
                    char_dim: d,
                });
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

pub const HEADER: &str = "|V|\tr\td_chr\tmean_f1";

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub point: Point,
    pub mean_f1: f64,
    pub best_epoch: usize,
}

/// Best first; equal scores keep enumeration order.
pub fn rank(mut rows: Vec<Row>) -> Vec<Row> {
    rows.sort_by(|a, b| b.mean_f1.total_cmp(&a.mean_f1).then(a.point.cmp(&b.point)));
    rows
}

pub fn format_table(rows: &[Row]) -> String {
    let mut out = format!("{HEADER}\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.4}\n", r.point, r.mean_f1));
    }
    out
}

/// Runs `folds`-fold cross validation at `point`. Each point gets its own
/// vocabulary built from the whole training corpus.
pub fn run_point(
    corpus: &Corpus,
    point: Point,
    base: &ModelConfig,
    cfg: &TrainConfig,
    folds: usize,
    embeddings: Option<&std::path::Path>,
) -> Result<Row> {
    let (words, chars) = ote_core::pipeline::build_vocabularies(corpus, point.vocab)?;
    let config = ModelConfig {
        hidden: point.hidden,
        char_dim: point.char_dim.unwrap_or(base.char_dim),
        ..base.clone()
    };
    let model = ote_core::pipeline::init_model(config, &words, &chars, embeddings)?;
    let data = ote_core::pipeline::encode(corpus, &words, &chars)?;
    let cv = cross_validate(&model, &data, folds, cfg)?;
    Ok(Row {
        point,
        mean_f1: cv.best_mean_f1,
        best_epoch: cv.best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(s: &str) -> List {
        parse_list(s).unwrap()
    }

    #[test]
    fn default_grid_sizes() {
        let (v, r, d) = (l("10000,20000,50000"), l("60,100,200"), l("20,50,100"));
        assert_eq!(enumerate(Variant::CharWord, &v, &r, &d).len(), 27);
        let wo = enumerate(Variant::WordOnly, &v, &r, &d);
        assert_eq!(wo.len(), 9);
        assert!(wo.iter().all(|p| p.char_dim.is_none()));
    }

    #[test]
    fn list_parsing() {
        assert_eq!(l("3, 1,2").0, vec![3, 1, 2]);
        assert!(parse_list("3,,4").is_err());
        assert!(parse_list("0").is_err());
        assert!(parse_list("x").is_err());
    }

    #[test]
    fn table_is_ranked() {
        let p = |v| Point {
            vocab: v,
            hidden: 60,
            char_dim: Some(20),
        };
        let rows = rank(vec![
            Row { point: p(2), mean_f1: 0.5, best_epoch: 1 },
            Row { point: p(1), mean_f1: 0.7, best_epoch: 3 },
            Row { point: p(3), mean_f1: 0.5, best_epoch: 2 },
        ]);
        let t = format_table(&rows);
        assert_eq!(t, "|V|\tr\td_chr\tmean_f1\n1\t60\t20\t0.7000\n2\t60\t20\t0.5000\n3\t60\t20\t0.5000\n");
    }
}
