use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;

use crate::numerics::Tensor;

use super::{DataError, Vocab};

/// Vectors read from a whitespace-separated text embedding file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainedEmbeddings {
    pub dim: usize,
    /// Entries in file order.
    pub entries: Vec<(String, Vec<f32>)>,
    index: HashMap<String, usize>,
    /// Lines whose token had already been seen.
    pub duplicates: usize,
}

impl PretrainedEmbeddings {
    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.index.get(token).map(|&i| self.entries[i].1.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, token: String, vector: Vec<f32>) {
        if self.index.contains_key(&token) {
            self.duplicates += 1;
        } else {
            self.index.insert(token.clone(), self.entries.len());
            self.entries.push((token, vector));
        }
    }

    /// Reads `token v1 .. vd` lines. An optional first line `count dim` is a
    /// header. `normalize` is applied to every token; the first occurrence of
    /// a normalized token wins. `dim = None` takes the dimension from the
    /// header or first entry.
    pub fn read<R: BufRead>(
        reader: R,
        dim: Option<usize>,
        normalize: impl Fn(&str) -> String,
    ) -> Result<Self, DataError> {
        let mut out = Self {
            dim: dim.unwrap_or(0),
            ..Self::default()
        };
        let mut fixed = dim.is_some();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| DataError::Format {
                line: lineno,
                message: e.to_string(),
            })?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if lineno == 1 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                let header_dim: usize = fields[1].parse().unwrap();
                if fixed && header_dim != out.dim {
                    return Err(DataError::Format {
                        line: lineno,
                        message: format!("header dimension {header_dim}, expected {}", out.dim),
                    });
                }
                out.dim = header_dim;
                fixed = true;
                continue;
            }
            let values = &fields[1..];
            if !fixed {
                out.dim = values.len();
                fixed = true;
            }
            if values.len() != out.dim {
                return Err(DataError::Format {
                    line: lineno,
                    message: format!("{} values, expected {}", values.len(), out.dim),
                });
            }
            let vector = values
                .iter()
                .map(|v| v.parse::<f32>())
                .collect::<Result<Vec<f32>, _>>()
                .map_err(|e| DataError::Format {
                    line: lineno,
                    message: e.to_string(),
                })?;
            out.push(normalize(fields[0]), vector);
        }
        Ok(out)
    }

    pub fn read_file(path: &Path, dim: Option<usize>) -> Result<Self, DataError> {
        let file = std::fs::File::open(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read(std::io::BufReader::new(file), dim, str::to_string)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedEmbeddings {
    /// `[dim, |V|]` table; column `i` embeds vocabulary entry `i`.
    pub matrix: Tensor<f32>,
    /// Fraction of non-reserved vocabulary entries found in the file.
    pub coverage: f64,
    pub duplicates: usize,
}

/// Uniform(-0.5/dim, 0.5/dim) initial table for embeddings without a
/// pretrained source.
pub fn random_table<R: Rng>(dim: usize, vocab_size: usize, rng: &mut R) -> Tensor<f32> {
    let bound = 0.5 / dim.max(1) as f32;
    let data = (0..dim * vocab_size).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(vec![dim, vocab_size], data).expect("shape matches")
}

/// Fills a `[dim, |V|]` table from pretrained vectors; entries missing from
/// the file keep their random initialization.
pub fn embeddings_for_vocab<R: Rng>(pre: &PretrainedEmbeddings, vocab: &Vocab, dim: usize, rng: &mut R) -> Result<LoadedEmbeddings, DataError> {
    if !pre.is_empty() && pre.dim != dim {
        return Err(DataError::Format {
            line: 1,
            message: format!("embedding dimension {}, expected {dim}", pre.dim),
        });
    }
    let mut matrix = random_table(dim, vocab.len(), rng);
    let v = vocab.len();
    let mut found = 0;
    for (i, sym) in vocab.symbols().iter().enumerate() {
        if let Some(vec) = pre.get(sym) {
            let col = i + 2;
            for (row, &x) in vec.iter().enumerate() {
                matrix.data_mut()[row * v + col] = x;
            }
            found += 1;
        }
    }
    let denom = vocab.symbols().len();
    Ok(LoadedEmbeddings {
        matrix,
        coverage: if denom == 0 { 0.0 } else { found as f64 / denom as f64 },
        duplicates: pre.duplicates,
    })
}

pub fn load_embeddings<R: Rng>(path: &Path, vocab: &Vocab, dim: usize, rng: &mut R) -> Result<LoadedEmbeddings, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let pre = PretrainedEmbeddings::read(std::io::BufReader::new(file), Some(dim), |t| vocab.normalize(t))?;
    if pre.duplicates > 0 {
        log::warn!("{}: {} duplicate tokens ignored", path.display(), pre.duplicates);
    }
    embeddings_for_vocab(&pre, vocab, dim, rng)
}
