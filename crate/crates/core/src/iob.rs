//! IOB-1 tag sequences and their token spans.
//!
//! Every token of a target expression is tagged `I`; `B` appears only on the
//! first token of an expression that directly follows another expression.

use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    I = 0,
    O = 1,
    B = 2,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::I, Tag::O, Tag::B];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        Tag::ALL.get(i).copied()
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tag::I => "I",
            Tag::O => "O",
            Tag::B => "B",
        };
        f.write_str(s)
    }
}

impl FromStr for Tag {
    type Err = IobError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "I" => Ok(Tag::I),
            "O" => Ok(Tag::O),
            "B" => Ok(Tag::B),
            other => Err(IobError::UnknownTag(other.to_string())),
        }
    }
}

/// Inclusive token range `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, token: usize) -> bool {
        self.start <= token && token <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IobError {
    #[error("span {start}..={end} is invalid for a sentence of {len} tokens")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("span {second:?} overlaps or precedes span {first:?}")]
    Overlap { first: TokenSpan, second: TokenSpan },
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
}

/// Checks that spans are in range, sorted and pairwise disjoint.
pub fn validate(n: usize, spans: &[TokenSpan]) -> Result<(), IobError> {
    for s in spans {
        if s.start > s.end || s.end >= n {
            return Err(IobError::OutOfRange {
                start: s.start,
                end: s.end,
                len: n,
            });
        }
    }
    for w in spans.windows(2) {
        if w[1].start <= w[0].end {
            return Err(IobError::Overlap {
                first: w[0],
                second: w[1],
            });
        }
    }
    Ok(())
}

pub fn encode(n: usize, spans: &[TokenSpan]) -> Result<Vec<Tag>, IobError> {
    validate(n, spans)?;
    let mut tags = vec![Tag::O; n];
    let mut prev_end: Option<usize> = None;
    for s in spans {
        for t in &mut tags[s.start..=s.end] {
            *t = Tag::I;
        }
        if s.start > 0 && prev_end == Some(s.start - 1) {
            tags[s.start] = Tag::B;
        }
        prev_end = Some(s.end);
    }
    Ok(tags)
}

/// Total inverse of [`encode`]. A `B` always starts a new span, even with no
/// phrase before it.
pub fn decode(tags: &[Tag]) -> Vec<TokenSpan> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            Tag::O => {
                if let Some(start) = open.take() {
                    spans.push(TokenSpan::new(start, i - 1));
                }
            }
            Tag::B => {
                if let Some(start) = open.replace(i) {
                    spans.push(TokenSpan::new(start, i - 1));
                }
            }
            Tag::I => {
                open.get_or_insert(i);
            }
        }
    }
    if let Some(start) = open {
        spans.push(TokenSpan::new(start, tags.len() - 1));
    }
    spans
}

pub fn tags_to_string(tags: &[Tag]) -> String {
    tags.iter().map(Tag::to_string).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Tag::{B, I, O};

    fn sp(s: usize, e: usize) -> TokenSpan {
        TokenSpan::new(s, e)
    }

    #[test]
    fn wine_list_example() {
        let tags = encode(8, &[sp(1, 2)]).unwrap();
        assert_eq!(tags_to_string(&tags), "O I I O O O O O");
        assert_eq!(decode(&tags), vec![sp(1, 2)]);
    }

    #[test]
    fn adjacent_phrases_get_boundary_b() {
        assert_eq!(encode(3, &[sp(0, 0), sp(1, 2)]).unwrap(), vec![I, B, I]);
        assert_eq!(decode(&[I, B, I]), vec![sp(0, 0), sp(1, 2)]);
    }

    #[test]
    fn empty_span_set() {
        assert_eq!(encode(4, &[]).unwrap(), vec![O; 4]);
        assert!(decode(&[O; 4]).is_empty());
        assert!(decode(&[]).is_empty());
    }

    #[test]
    fn orphan_b_starts_span() {
        assert_eq!(decode(&[B, O, B]), vec![sp(0, 0), sp(2, 2)]);
    }

    #[test]
    fn invalid_spans_rejected() {
        assert!(matches!(encode(3, &[sp(2, 3)]), Err(IobError::OutOfRange { .. })));
        assert!(matches!(encode(3, &[sp(2, 1)]), Err(IobError::OutOfRange { .. })));
        assert!(matches!(
            encode(5, &[sp(0, 2), sp(2, 3)]),
            Err(IobError::Overlap { .. })
        ));
        assert!(matches!(
            encode(5, &[sp(3, 3), sp(0, 1)]),
            Err(IobError::Overlap { .. })
        ));
    }

    #[test]
    fn tag_codes_are_stable() {
        assert_eq!((I.index(), O.index(), B.index()), (0, 1, 2));
        assert_eq!("B".parse::<Tag>().unwrap(), B);
        assert!("X".parse::<Tag>().is_err());
    }

    #[test]
    fn decode_total_for_all_short_sequences() {
        for n in 0..=8usize {
            for code in 0..3usize.pow(n as u32) {
                let mut c = code;
                let tags: Vec<Tag> = (0..n)
                    .map(|_| {
                        let t = Tag::from_index(c % 3).unwrap();
                        c /= 3;
                        t
                    })
                    .collect();
                let spans = decode(&tags);
                validate(n, &spans).unwrap();
            }
        }
    }

    /// Random valid span sets over sentences of up to 30 tokens.
    pub(crate) fn span_sets() -> impl Strategy<Value = (usize, Vec<TokenSpan>)> {
        (1usize..=30).prop_flat_map(|n| {
            (Just(n), prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n))
        })
        .prop_map(|(n, inside, cut)| {
            let mut spans = Vec::new();
            let mut open: Option<usize> = None;
            for i in 0..n {
                if inside[i] {
                    match open {
                        Some(s) if cut[i] => {
                            spans.push(sp(s, i - 1));
                            open = Some(i);
                        }
                        Some(_) => {}
                        None => open = Some(i),
                    }
                } else if let Some(s) = open.take() {
                    spans.push(sp(s, i - 1));
                }
            }
            if let Some(s) = open {
                spans.push(sp(s, n - 1));
            }
            (n, spans)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn decode_inverts_encode((n, spans) in span_sets()) {
            let tags = encode(n, &spans).unwrap();
            prop_assert_eq!(tags.len(), n);
            for (p, t) in tags.iter().enumerate() {
                if *t == B {
                    prop_assert!(p > 0 && spans.iter().any(|s| s.end == p - 1));
                }
            }
            prop_assert_eq!(decode(&tags), spans);
        }
    }
}
