use crate::iob::TokenSpan;

/// A token with character (not byte) offsets into its sentence; `char_end`
/// is exclusive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Whitespace split, then every leading and trailing punctuation character
/// becomes its own token. Inner punctuation (`wait-staff`, `don't`) stays.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let make = |s: usize, e: usize| Token {
        text: chars[s..e].iter().collect(),
        char_start: s,
        char_end: e,
    };
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let mut start = i;
        let mut end = i;
        while end < chars.len() && !chars[end].is_whitespace() {
            end += 1;
        }
        i = end;

        while start < end && is_punct(chars[start]) {
            tokens.push(make(start, start + 1));
            start += 1;
        }
        let mut trailing = Vec::new();
        while end > start && is_punct(chars[end - 1]) {
            trailing.push(make(end - 1, end));
            end -= 1;
        }
        if start < end {
            tokens.push(make(start, end));
        }
        tokens.extend(trailing.into_iter().rev());
    }
    tokens
}

/// Character span `[start, end)` as annotated in the source data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Alignment {
    pub spans: Vec<TokenSpan>,
    /// Character spans that touched no token.
    pub dropped: usize,
}

/// Maps character spans onto the tokens they overlap. Overlapping results are
/// merged so the output is sorted and disjoint.
pub fn align_spans(tokens: &[Token], char_spans: &[CharSpan]) -> Alignment {
    let mut out = Alignment::default();
    let mut spans: Vec<TokenSpan> = Vec::new();
    for cs in char_spans {
        if cs.start >= cs.end {
            out.dropped += 1;
            continue;
        }
        let hit: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.char_start < cs.end && cs.start < t.char_end)
            .map(|(i, _)| i)
            .collect();
        match (hit.first(), hit.last()) {
            (Some(&s), Some(&e)) => spans.push(TokenSpan::new(s, e)),
            _ => out.dropped += 1,
        }
    }
    spans.sort();
    for s in spans {
        match out.spans.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => out.spans.push(s),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn splits_final_punctuation() {
        let t = tokenize("The wine list is also really nice.");
        assert_eq!(texts(&t), ["The", "wine", "list", "is", "also", "really", "nice", "."]);
    }

    #[test]
    fn empty_and_blank_text() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \t ").is_empty());
    }

    #[test]
    fn keeps_inner_hyphen_and_apostrophe() {
        assert_eq!(texts(&tokenize("wait-staff")), ["wait-staff"]);
        assert_eq!(texts(&tokenize("(don't!)")), ["(", "don't", "!", ")"]);
        assert_eq!(texts(&tokenize("...")), [".", ".", "."]);
    }

    #[test]
    fn offsets_are_character_based() {
        let text = "Café  crème, très bon!";
        let chars: Vec<char> = text.chars().collect();
        for t in tokenize(text) {
            assert!(t.char_start < t.char_end);
            let s: String = chars[t.char_start..t.char_end].iter().collect();
            assert_eq!(s, t.text);
        }
    }

    #[test]
    fn alignment_examples() {
        let tokens = tokenize("wine list");
        assert_eq!(tokens[0].char_end, 4);
        assert_eq!(tokens[1].char_start, 5);
        let a = align_spans(&tokens, &[CharSpan { start: 0, end: 9 }]);
        assert_eq!(a.spans, vec![TokenSpan::new(0, 1)]);

        let a = align_spans(&tokens, &[CharSpan { start: 5, end: 9 }]);
        assert_eq!(a.spans, vec![TokenSpan::new(1, 1)]);

        // half of "wine" still pulls in the whole token
        let a = align_spans(&tokens, &[CharSpan { start: 2, end: 4 }]);
        assert_eq!(a.spans, vec![TokenSpan::new(0, 0)]);

        let a = align_spans(&tokens, &[CharSpan { start: 4, end: 5 }]);
        assert!(a.spans.is_empty());
        assert_eq!(a.dropped, 1);
    }

    #[test]
    fn alignment_merges_overlaps() {
        let tokens = tokenize("a b c d");
        let a = align_spans(
            &tokens,
            &[
                CharSpan { start: 2, end: 5 },
                CharSpan { start: 0, end: 3 },
                CharSpan { start: 6, end: 7 },
            ],
        );
        assert_eq!(a.spans, vec![TokenSpan::new(0, 2), TokenSpan::new(3, 3)]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn token_text_matches_offsets(text in "[a-zA-Zé0-9 ,.!'()-]{0,60}") {
                let chars: Vec<char> = text.chars().collect();
                let mut prev_end = 0;
                for t in tokenize(&text) {
                    prop_assert!(t.char_start < t.char_end);
                    prop_assert!(t.char_start >= prev_end);
                    prev_end = t.char_end;
                    let s: String = chars[t.char_start..t.char_end].iter().collect();
                    prop_assert_eq!(s, t.text);
                }
            }

            #[test]
            fn aligned_spans_are_valid(
                text in "[a-z ,.]{1,40}",
                raw in prop::collection::vec((0usize..45, 0usize..8), 0..5),
            ) {
                let tokens = tokenize(&text);
                let spans: Vec<CharSpan> = raw.iter().map(|&(s, l)| CharSpan { start: s, end: s + l }).collect();
                let a = align_spans(&tokens, &spans);
                prop_assert!(crate::iob::validate(tokens.len(), &a.spans).is_ok());
            }
        }
    }
}
