use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::{DataError, Sentence};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabKind {
    Word,
    Char,
}

impl fmt::Display for VocabKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabKind::Word => "word",
            VocabKind::Char => "char",
        })
    }
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_SYMBOL: &str = "<pad>";
pub const UNK_SYMBOL: &str = "<unk>";

/// Dense symbol/index map. Index 0 is padding, 1 is the unknown symbol,
/// the rest are ordered by descending corpus frequency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    kind: VocabKind,
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// A vocabulary holding only the reserved entries; every symbol maps to UNK.
    pub fn reserved_only(kind: VocabKind) -> Self {
        Self::from_symbols(kind, std::iter::empty::<String>())
    }

    /// Rebuilds a vocabulary from its non-reserved symbols, in index order.
    pub fn from_symbols<I, S>(kind: VocabKind, symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            kind,
            symbols: vec![PAD_SYMBOL.to_string(), UNK_SYMBOL.to_string()],
            index: HashMap::new(),
        };
        for s in symbols {
            let s = s.into();
            if !v.index.contains_key(&s) && s != PAD_SYMBOL && s != UNK_SYMBOL {
                v.index.insert(s.clone(), v.symbols.len());
                v.symbols.push(s);
            }
        }
        v
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Applies the kind's normalization: words are lowercased.
    pub fn normalize(&self, symbol: &str) -> String {
        match self.kind {
            VocabKind::Word => symbol.to_lowercase(),
            VocabKind::Char => symbol.to_string(),
        }
    }

    /// Index of an already-normalized symbol, if known.
    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Index of a raw symbol after normalization; UNK when absent.
    pub fn id(&self, symbol: &str) -> usize {
        self.get(&self.normalize(symbol)).unwrap_or(UNK)
    }

    pub fn char_id(&self, c: char) -> usize {
        let mut buf = [0u8; 4];
        self.get(c.encode_utf8(&mut buf)).unwrap_or(UNK)
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(&self.normalize(symbol))
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    /// Non-reserved symbols in index (frequency) order.
    pub fn symbols(&self) -> &[String] {
        &self.symbols[2..]
    }
}

/// Keeps the `max_size` most frequent symbols (ties in lexicographic order)
/// after the two reserved entries.
pub fn build_vocab(sentences: &[Sentence], kind: VocabKind, max_size: usize) -> Result<Vocab, DataError> {
    if max_size == 0 {
        return Err(DataError::Validation("vocabulary max_size must be >= 1".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in sentences {
        for t in &s.tokens {
            match kind {
                VocabKind::Word => *counts.entry(t.text.to_lowercase()).or_default() += 1,
                VocabKind::Char => {
                    for c in t.text.chars().filter(|c| !c.is_whitespace()) {
                        *counts.entry(c.to_string()).or_default() += 1;
                    }
                }
            }
        }
    }
    if counts.is_empty() {
        return Err(DataError::Validation(format!("cannot build a {kind} vocabulary from an empty corpus")));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    // stable sort keeps the BTreeMap's lexicographic order among ties
    ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
    Ok(Vocab::from_symbols(kind, ranked.into_iter().take(max_size).map(|(s, _)| s)))
}
