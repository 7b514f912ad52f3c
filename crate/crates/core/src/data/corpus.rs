use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use crate::iob::{self, Tag, TokenSpan};

use super::tokenize::{align_spans, tokenize, CharSpan, Token};
use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub gold_spans: Vec<TokenSpan>,
    /// Annotated character spans the gold token spans were aligned from.
    pub char_spans: Vec<CharSpan>,
}

impl Sentence {
    /// Tokenizes `text` and aligns the annotated character spans.
    pub fn from_text(id: impl Into<String>, text: impl Into<String>, char_spans: Vec<CharSpan>) -> (Self, usize) {
        let text = text.into();
        let tokens = tokenize(&text);
        let alignment = align_spans(&tokens, &char_spans);
        let sentence = Self {
            id: id.into(),
            text,
            tokens,
            gold_spans: alignment.spans,
            char_spans,
        };
        (sentence, alignment.dropped)
    }

    /// Builds a sentence from pre-split tokens joined by single spaces.
    pub fn from_tokens(id: impl Into<String>, words: &[String], gold_spans: Vec<TokenSpan>) -> Self {
        let mut text = String::new();
        let mut tokens = Vec::with_capacity(words.len());
        let mut offset = 0;
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                text.push(' ');
                offset += 1;
            }
            let len = w.chars().count();
            text.push_str(w);
            tokens.push(Token {
                text: w.clone(),
                char_start: offset,
                char_end: offset + len,
            });
            offset += len;
        }
        let char_spans = gold_spans
            .iter()
            .map(|s| CharSpan {
                start: tokens[s.start].char_start,
                end: tokens[s.end].char_end,
            })
            .collect();
        Self {
            id: id.into(),
            text,
            tokens,
            gold_spans,
            char_spans,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.text.as_str())
    }

    /// Source text covered by a token span.
    pub fn surface(&self, span: TokenSpan) -> String {
        let start = self.tokens[span.start].char_start;
        let end = self.tokens[span.end].char_end;
        self.text.chars().skip(start).take(end - start).collect()
    }

    pub fn gold_tags(&self) -> Result<Vec<Tag>, DataError> {
        iob::encode(self.tokens.len(), &self.gold_spans)
            .map_err(|e| DataError::Validation(format!("sentence {}: {e}", self.id)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub sentences: usize,
    /// Distinct annotated target character spans.
    pub targets: usize,
    /// Gold token spans after alignment.
    pub token_spans: usize,
    pub min_target_chars: Option<usize>,
    pub max_target_chars: Option<usize>,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>, split: Split) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for s in &sentences {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::Validation(format!("duplicate sentence id {}", s.id)));
            }
            iob::validate(s.tokens.len(), &s.gold_spans)
                .map_err(|e| DataError::Validation(format!("sentence {}: {e}", s.id)))?;
        }
        Ok(Self { sentences, split })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn stats(&self) -> CorpusStats {
        let lens: Vec<usize> = self
            .sentences
            .iter()
            .flat_map(|s| s.char_spans.iter().map(|c| c.end - c.start))
            .collect();
        CorpusStats {
            sentences: self.sentences.len(),
            targets: lens.len(),
            token_spans: self.sentences.iter().map(|s| s.gold_spans.len()).sum(),
            min_target_chars: lens.iter().copied().min(),
            max_target_chars: lens.iter().copied().max(),
        }
    }
}

fn attr_usize(node: roxmltree::Node<'_, '_>, name: &str, sid: &str) -> Result<usize, DataError> {
    let raw = node
        .attribute(name)
        .ok_or_else(|| DataError::Validation(format!("sentence {sid}: Opinion without {name}")))?;
    raw.trim()
        .parse()
        .map_err(|_| DataError::Validation(format!("sentence {sid}: bad {name}={raw:?}")))
}

/// Parses the ABSA-2016 review XML. `NULL` targets are skipped and repeated
/// `(from, to)` pairs within a sentence collapse to one span.
pub fn parse_semeval_str(xml: &str, split: Split) -> Result<Corpus, DataError> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| DataError::Xml(e.to_string()))?;
    let mut sentences = Vec::new();
    let mut dropped = 0;
    for node in doc.descendants().filter(|n| n.has_tag_name("sentence")) {
        let id = node
            .attribute("id")
            .map(str::to_string)
            .unwrap_or_else(|| format!("s{}", sentences.len()));
        let text = node
            .children()
            .find(|c| c.has_tag_name("text"))
            .and_then(|t| t.text())
            .unwrap_or("")
            .to_string();
        let text_len = text.chars().count();

        let mut char_spans = BTreeSet::new();
        for op in node.descendants().filter(|n| n.has_tag_name("Opinion")) {
            match op.attribute("target") {
                None | Some("NULL") => continue,
                Some(_) => {}
            }
            let from = attr_usize(op, "from", &id)?;
            let to = attr_usize(op, "to", &id)?;
            if from > to || to > text_len {
                return Err(DataError::Validation(format!(
                    "sentence {id}: span {from}..{to} outside text of {text_len} chars"
                )));
            }
            char_spans.insert(CharSpan { start: from, end: to });
        }
        let (sentence, d) = Sentence::from_text(id, text, char_spans.into_iter().collect());
        dropped += d;
        sentences.push(sentence);
    }
    if dropped > 0 {
        log::warn!("{dropped} target spans aligned to no token and were dropped");
    }
    Corpus::new(sentences, split)
}

pub fn parse_semeval_xml(path: &Path, split: Split) -> Result<Corpus, DataError> {
    let xml = super::read_to_string(path)?;
    parse_semeval_str(&xml, split).map_err(|e| match e {
        DataError::Xml(msg) => DataError::Xml(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// One `token<TAB>tag` per line, blank lines between sentences.
pub fn parse_conll_str(input: &str, split: Split) -> Result<Corpus, DataError> {
    let mut sentences = Vec::new();
    let mut words = Vec::new();
    let mut tags = Vec::new();
    let flush = |words: &mut Vec<String>, tags: &mut Vec<Tag>, sentences: &mut Vec<Sentence>| {
        if !words.is_empty() {
            let spans = iob::decode(tags);
            let id = format!("s{}", sentences.len());
            sentences.push(Sentence::from_tokens(id, words, spans));
            words.clear();
            tags.clear();
        }
    };
    for (lineno, line) in input.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut words, &mut tags, &mut sentences);
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(word), Some(tag), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(DataError::Format {
                line: lineno + 1,
                message: "expected token<TAB>tag".into(),
            });
        };
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(DataError::Format {
                line: lineno + 1,
                message: format!("invalid token {word:?}"),
            });
        }
        let tag: Tag = tag.trim().parse().map_err(|e: iob::IobError| DataError::Format {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        words.push(word.to_string());
        tags.push(tag);
    }
    flush(&mut words, &mut tags, &mut sentences);
    Corpus::new(sentences, split)
}

pub fn parse_conll(path: &Path, split: Split) -> Result<Corpus, DataError> {
    parse_conll_str(&super::read_to_string(path)?, split)
}

/// Writes `token<TAB>tag` lines with a blank line after each sentence.
pub fn write_conll(sentences: &[(&Sentence, &[Tag])]) -> String {
    let mut out = String::new();
    for (s, tags) in sentences {
        for (t, tag) in s.tokens.iter().zip(tags.iter()) {
            out.push_str(&t.text);
            out.push('\t');
            out.push_str(&tag.to_string());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// One sentence per non-blank line, ids `s0`, `s1`, ...
pub fn parse_plain_text(input: &str) -> Corpus {
    let sentences = input
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| Sentence::from_text(format!("s{i}"), l.trim_end_matches('\r'), Vec::new()).0)
        .collect();
    Corpus {
        sentences,
        split: Split::Test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"<?xml version="1.0" encoding="UTF-8" standalone="yes"?>
<Reviews>
  <Review rid="1">
    <sentences>
      <sentence id="1:0">
        <text>Moules were excellent .</text>
        <Opinions>
          <Opinion target="Moules" category="FOOD#QUALITY" polarity="positive" from="0" to="6"/>
          <Opinion target="Moules" category="FOOD#STYLE_OPTIONS" polarity="positive" from="0" to="6"/>
        </Opinions>
      </sentence>
      <sentence id="1:1">
        <text>Great place.</text>
        <Opinions>
          <Opinion target="NULL" category="RESTAURANT#GENERAL" polarity="positive" from="0" to="0"/>
        </Opinions>
      </sentence>
      <sentence id="1:2">
        <text>The wine list is also really nice.</text>
        <Opinions>
          <Opinion target="wine list" category="DRINKS#STYLE_OPTIONS" polarity="positive" from="4" to="13"/>
        </Opinions>
      </sentence>
      <sentence id="1:3" OutOfScope="TRUE">
        <text>No opinions here.</text>
      </sentence>
    </sentences>
  </Review>
</Reviews>"#;

    #[test]
    fn parses_sample_review() {
        let c = parse_semeval_str(SAMPLE, Split::Train).unwrap();
        assert_eq!(c.len(), 4);
        let s0 = &c.sentences[0];
        assert_eq!(s0.id, "1:0");
        assert_eq!(s0.char_spans, vec![CharSpan { start: 0, end: 6 }]);
        assert_eq!(s0.gold_spans, vec![TokenSpan::new(0, 0)]);
        assert!(c.sentences[1].gold_spans.is_empty());
        let s2 = &c.sentences[2];
        assert_eq!(s2.gold_spans, vec![TokenSpan::new(1, 2)]);
        assert_eq!(s2.surface(s2.gold_spans[0]), "wine list");
        assert_eq!(iob::tags_to_string(&s2.gold_tags().unwrap()), "O I I O O O O O");
        let st = c.stats();
        assert_eq!((st.sentences, st.targets, st.token_spans), (4, 2, 2));
        assert_eq!((st.min_target_chars, st.max_target_chars), (Some(6), Some(9)));
    }

    #[test]
    fn malformed_xml_reports_position() {
        let err = parse_semeval_str("<Reviews><sentence></Reviews>", Split::Train).unwrap_err();
        match err {
            DataError::Xml(msg) => assert!(msg.contains("1:"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn offsets_outside_text_rejected() {
        let xml = r#"<Reviews><sentence id="a"><text>short</text>
            <Opinions><Opinion target="x" from="2" to="40"/></Opinions></sentence></Reviews>"#;
        assert!(matches!(parse_semeval_str(xml, Split::Test), Err(DataError::Validation(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let xml = r#"<Reviews><sentence id="a"><text>x</text></sentence><sentence id="a"><text>y</text></sentence></Reviews>"#;
        assert!(matches!(parse_semeval_str(xml, Split::Test), Err(DataError::Validation(_))));
    }

    #[test]
    fn conll_roundtrip_through_tags() {
        let input = "The\tO\nwine\tI\nlist\tI\n.\tO\n\nfish\tI\nchips\tB\n";
        let c = parse_conll_str(input, Split::Train).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.sentences[0].text, "The wine list .");
        assert_eq!(c.sentences[0].gold_spans, vec![TokenSpan::new(1, 2)]);
        assert_eq!(c.sentences[1].gold_spans, vec![TokenSpan::new(0, 0), TokenSpan::new(1, 1)]);
        let tags: Vec<Vec<Tag>> = c.sentences.iter().map(|s| s.gold_tags().unwrap()).collect();
        let pairs: Vec<(&Sentence, &[Tag])> = c.sentences.iter().zip(&tags).map(|(s, t)| (s, t.as_slice())).collect();
        assert_eq!(write_conll(&pairs), input.to_string() + "\n");
    }

    #[test]
    fn conll_errors_carry_line_numbers() {
        assert!(matches!(
            parse_conll_str("a\tO\nb X\n", Split::Train),
            Err(DataError::Format { line: 2, .. })
        ));
        assert!(matches!(
            parse_conll_str("a\tQ\n", Split::Train),
            Err(DataError::Format { line: 1, .. })
        ));
    }

    #[test]
    fn plain_text_ids_are_sequential() {
        let c = parse_plain_text("First one.\n\nSecond one\n");
        let ids: Vec<&str> = c.sentences.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["s0", "s1"]);
        assert!(parse_plain_text("").is_empty());
    }
}
