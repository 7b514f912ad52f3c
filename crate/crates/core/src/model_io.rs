//! Binary model container.
//!
//! Layout: `OTEM`, u32 format version, u32 metadata length, metadata as
//! UTF-8 `key=value` lines (config and vocabularies), u32 parameter count,
//! then per parameter: u32 name length, name bytes, u32 rank, u32 dims,
//! little-endian f32 values. All integers are little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{Vocab, VocabKind};
use crate::layers::{ModelConfig, ModelError, ModelParams};
use crate::numerics::{Parameterized, Tensor};

pub const MAGIC: &[u8; 4] = b"OTEM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A model together with the vocabularies its embedding tables index.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub params: ModelParams<f32>,
    pub words: Vocab,
    pub chars: Vocab,
}

fn metadata(m: &SavedModel) -> String {
    let c = &m.params.config;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    kv("variant", c.variant.to_string());
    kv("word_vocab_size", c.word_vocab_size.to_string());
    kv("char_vocab_size", c.char_vocab_size.to_string());
    kv("word_dim", c.word_dim.to_string());
    kv("hidden", c.hidden.to_string());
    kv("char_dim", c.char_dim.to_string());
    kv("dropout", c.dropout.to_string());
    kv("seed", c.seed.to_string());
    kv("word_emb_trainable", c.word_emb_trainable.to_string());
    kv("word_vocab", m.words.symbols().join(" "));
    kv("char_vocab", m.chars.symbols().join(" "));
    s
}

fn parse_metadata(text: &str) -> Result<(ModelConfig, Vocab, Vocab), ModelIoError> {
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelIoError::Format(format!("bad metadata line {line:?}")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| ModelIoError::Format(format!("missing metadata key {k}")));
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, ModelIoError> {
        v.parse().map_err(|_| ModelIoError::Format(format!("bad value for {k}: {v:?}")))
    }
    let config = ModelConfig {
        variant: get("variant")?.parse()?,
        word_vocab_size: num("word_vocab_size", get("word_vocab_size")?)?,
        char_vocab_size: num("char_vocab_size", get("char_vocab_size")?)?,
        word_dim: num("word_dim", get("word_dim")?)?,
        hidden: num("hidden", get("hidden")?)?,
        char_dim: num("char_dim", get("char_dim")?)?,
        dropout: num("dropout", get("dropout")?)?,
        seed: num("seed", get("seed")?)?,
        word_emb_trainable: num("word_emb_trainable", get("word_emb_trainable")?)?,
    };
    let vocab = |kind, k: &str| -> Result<Vocab, ModelIoError> {
        let v = Vocab::from_symbols(kind, get(k)?.split(' ').filter(|s| !s.is_empty()));
        Ok(v)
    };
    let words = vocab(VocabKind::Word, "word_vocab")?;
    let chars = vocab(VocabKind::Char, "char_vocab")?;
    if words.len() != config.word_vocab_size || chars.len() != config.char_vocab_size {
        return Err(ModelIoError::Format("vocabulary sizes disagree with the configuration".into()));
    }
    Ok((config, words, chars))
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<(), ModelIoError> {
    let v = u32::try_from(v).map_err(|_| ModelIoError::Format(format!("{v} does not fit in 32 bits")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize, ModelIoError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, ModelIoError> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(ModelIoError::Format("unexpected end of file".into()));
    }
    Ok(buf)
}

pub fn write_model<W: Write>(mut w: W, m: &SavedModel) -> Result<(), ModelIoError> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let meta = metadata(m);
    put_u32(&mut w, meta.len())?;
    w.write_all(meta.as_bytes())?;

    let mut records = Vec::new();
    m.params.visit_params(&mut |name, t| records.push((name.to_string(), t)));
    put_u32(&mut w, records.len())?;
    for (name, t) in records {
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut w, d)?;
        }
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<SavedModel, ModelIoError> {
    let magic = get_bytes(&mut r, 4)?;
    if magic != MAGIC {
        return Err(ModelIoError::Format("not a model file (bad magic)".into()));
    }
    let version = get_u32(&mut r)?;
    if version != FORMAT_VERSION as usize {
        return Err(ModelIoError::Format(format!("unsupported format version {version}")));
    }
    let meta_len = get_u32(&mut r)?;
    let meta = String::from_utf8(get_bytes(&mut r, meta_len)?).map_err(|_| ModelIoError::Format("metadata is not UTF-8".into()))?;
    let (config, words, chars) = parse_metadata(&meta)?;

    let count = get_u32(&mut r)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = get_u32(&mut r)?;
        let name = String::from_utf8(get_bytes(&mut r, len)?).map_err(|_| ModelIoError::Format("parameter name is not UTF-8".into()))?;
        let rank = get_u32(&mut r)?;
        let shape = (0..rank).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = get_bytes(&mut r, n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| ModelIoError::Format(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(ModelIoError::Format(format!("duplicate parameter {name}")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(ModelIoError::Format("trailing bytes after the last parameter".into()));
    }

    let mut params = ModelParams::<f32>::new(config)?;
    let mut problem = None;
    params.visit_params_mut(&mut |name, slot| match tensors.remove(name) {
        Some(t) if t.shape() == slot.shape() => *slot = t,
        Some(t) => {
            problem.get_or_insert(format!("{name} has shape {:?}, expected {:?}", t.shape(), slot.shape()));
        }
        None => {
            problem.get_or_insert(format!("missing parameter {name}"));
        }
    });
    if let Some(p) = problem {
        return Err(ModelIoError::Format(p));
    }
    if let Some(name) = tensors.keys().next() {
        return Err(ModelIoError::Format(format!("unexpected parameter {name}")));
    }
    Ok(SavedModel { params, words, chars })
}

pub fn save_model(path: &Path, m: &SavedModel) -> Result<(), ModelIoError> {
    let mut buf = Vec::new();
    write_model(&mut buf, m)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SavedModel, ModelIoError> {
    let file = std::fs::File::open(path)?;
    read_model(std::io::BufReader::new(file))
}
