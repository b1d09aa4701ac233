//! Prompt syntax with namecon references.
//!
//! A prompt is plain text with zero or more `<guiding concept | keyword>`
//! segments. The encoder only ever sees the guiding concepts; the embeddings
//! at each guiding span are then replaced by the keyword's namecon rows.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::image::Image;
use crate::naming::validate_keyword;
use crate::pipeline::{tokenize, EmbeddingList, Pipeline, PipelineError, Rendering};
use crate::vocabulary::Vocabulary;

/// Malformed prompt. Positions are character offsets into the prompt.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("unclosed '<' at {pos}")]
    UnclosedBracket { pos: usize },
    #[error("'>' at {pos} has no matching '<'")]
    UnmatchedClose { pos: usize },
    #[error("missing '|' in reference at {start}..{end}")]
    MissingSeparator { start: usize, end: usize },
    #[error("empty guiding concept in reference at {pos}")]
    EmptyGuiding { pos: usize },
    #[error("empty keyword in reference at {pos}")]
    EmptyKeyword { pos: usize },
    #[error("nested '<' at {pos}")]
    NestedBracket { pos: usize },
    #[error("invalid keyword {keyword:?} at {pos}")]
    InvalidKeyword { pos: usize, keyword: String },
}

impl ParseError {
    /// Character offset the error points at.
    pub fn position(&self) -> usize {
        match *self {
            Self::UnclosedBracket { pos }
            | Self::UnmatchedClose { pos }
            | Self::EmptyGuiding { pos }
            | Self::EmptyKeyword { pos }
            | Self::NestedBracket { pos }
            | Self::InvalidKeyword { pos, .. } => pos,
            Self::MissingSeparator { start, .. } => start,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("unknown keyword {0:?}")]
    UnknownKeyword(String),
    #[error("namecon {keyword:?} has dimension {got}, pipeline uses {expected}")]
    DimensionMismatch { keyword: String, expected: usize, got: usize },
    #[error("base embeddings hold {got} tokens but the prompt has {expected}")]
    BaseMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    NameconRef { guiding: String, keyword: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct PromptAst {
    pub segments: Vec<Segment>,
}

/// Prints the canonical prompt form; parsing it gives back the same AST.
impl fmt::Display for PromptAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.segments {
            match s {
                Segment::Literal(t) => f.write_str(t)?,
                Segment::NameconRef { guiding, keyword } => write!(f, "<{guiding} | {keyword}>")?,
            }
        }
        Ok(())
    }
}

pub fn parse(prompt: &str) -> Result<PromptAst, ParseError> {
    let chars: Vec<char> = prompt.chars().collect();
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            '>' => return Err(ParseError::UnmatchedClose { pos: i }),
            '<' => {
                let start = i;
                let mut j = i + 1;
                let mut bars = Vec::new();
                let end = loop {
                    match chars.get(j) {
                        None => return Err(ParseError::UnclosedBracket { pos: start }),
                        Some('<') => return Err(ParseError::NestedBracket { pos: j }),
                        Some('>') => break j,
                        Some('|') => bars.push(j),
                        Some(_) => {}
                    }
                    j += 1;
                };
                let Some(&bar) = bars.first() else {
                    return Err(ParseError::MissingSeparator { start, end: end + 1 });
                };
                let guiding: String = chars[start + 1..bar].iter().collect();
                let keyword: String = chars[bar + 1..end].iter().collect();
                let (guiding, keyword) = (guiding.trim(), keyword.trim());
                if guiding.is_empty() {
                    return Err(ParseError::EmptyGuiding { pos: start + 1 });
                }
                if keyword.is_empty() {
                    return Err(ParseError::EmptyKeyword { pos: bar + 1 });
                }
                if bars.len() > 1 || validate_keyword(keyword).is_err() {
                    return Err(ParseError::InvalidKeyword {
                        pos: bar + 1,
                        keyword: keyword.to_string(),
                    });
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::NameconRef {
                    guiding: guiding.to_string(),
                    keyword: keyword.to_string(),
                });
                i = end + 1;
            }
            c => {
                literal.push(c);
                i += 1;
            }
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(PromptAst { segments })
}

impl PromptAst {
    fn segment_text(s: &Segment) -> &str {
        match s {
            Segment::Literal(t) => t,
            Segment::NameconRef { guiding, .. } => guiding,
        }
    }

    /// The prompt with every reference replaced by its guiding concept. A
    /// space is inserted where a reference would otherwise fuse with a word.
    pub fn stripped(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            let text = Self::segment_text(s);
            let fuses = out.chars().last().is_some_and(|c| !c.is_whitespace())
                && text.chars().next().is_some_and(|c| !c.is_whitespace());
            if fuses {
                out.push(' ');
            }
            out.push_str(text);
        }
        out
    }

    /// Tokens of [`Self::stripped`].
    pub fn stripped_tokens(&self) -> Vec<String> {
        self.segments.iter().flat_map(|s| tokenize(Self::segment_text(s))).collect()
    }

    /// `(keyword, token range of its guiding concept)` for every reference.
    pub fn spans(&self) -> Vec<(&str, Range<usize>)> {
        let mut pos = 0;
        let mut out = Vec::new();
        for s in &self.segments {
            let n = tokenize(Self::segment_text(s)).len();
            if let Segment::NameconRef { keyword, .. } = s {
                out.push((keyword.as_str(), pos..pos + n));
            }
            pos += n;
        }
        out
    }

    pub fn references(&self) -> impl Iterator<Item = (&str, &str)> {
        self.segments.iter().filter_map(|s| match s {
            Segment::NameconRef { guiding, keyword } => Some((guiding.as_str(), keyword.as_str())),
            Segment::Literal(_) => None,
        })
    }
}

/// Splices namecon rows over each guiding span of `base`, shifting later
/// positions when a namecon has a different length than its span. Spliced
/// rows take the slot of the span they replace.
pub fn substitute(
    ast: &PromptAst,
    base: &EmbeddingList,
    vocab: &Vocabulary,
    pad: &[f64],
    max_len: usize,
) -> Result<EmbeddingList, PromptError> {
    let occupied = ast.stripped_tokens().len();
    if base.occupied() != occupied {
        return Err(PromptError::BaseMismatch {
            expected: occupied,
            got: base.occupied(),
        });
    }
    let mut rows = Vec::with_capacity(max_len);
    let mut slots = Vec::with_capacity(max_len);
    let mut next = 0;
    for (keyword, span) in ast.spans() {
        let namecon = vocab
            .get(keyword)
            .ok_or_else(|| PromptError::UnknownKeyword(keyword.to_string()))?;
        if namecon.dim() != base.dim() {
            return Err(PromptError::DimensionMismatch {
                keyword: keyword.to_string(),
                expected: base.dim(),
                got: namecon.dim(),
            });
        }
        rows.extend_from_slice(&base.rows()[next..span.start]);
        slots.extend_from_slice(&base.slots()[next..span.start]);
        let slot = base.slots()[span.start];
        rows.extend(namecon.embeddings.iter().cloned());
        slots.extend(std::iter::repeat_n(slot, namecon.k()));
        next = span.end;
    }
    rows.extend_from_slice(&base.rows()[next..occupied]);
    slots.extend_from_slice(&base.slots()[next..occupied]);
    Ok(EmbeddingList::from_occupied(rows, slots, pad, max_len)?)
}

/// Parses, encodes the stripped prompt and substitutes namecons.
pub fn embed(pipeline: &Pipeline, prompt: &str, vocab: &Vocabulary) -> Result<EmbeddingList, PromptError> {
    let ast = parse(prompt)?;
    for (_, keyword) in ast.references() {
        if vocab.get(keyword).is_none() {
            return Err(PromptError::UnknownKeyword(keyword.to_string()));
        }
    }
    let base = pipeline.encode(&ast.stripped_tokens())?;
    substitute(&ast, &base, vocab, pipeline.pad_embedding(), pipeline.max_len())
}

pub fn generate(pipeline: &Pipeline, prompt: &str, vocab: &Vocabulary, seed: u64) -> Result<Image, PromptError> {
    Ok(generate_full(pipeline, prompt, vocab, seed)?.image)
}

/// Like [`generate`] but also returns the object mask.
pub fn generate_full(
    pipeline: &Pipeline,
    prompt: &str,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Rendering, PromptError> {
    let list = embed(pipeline, prompt, vocab)?;
    Ok(pipeline.decode_full(&list, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Slot;
    use crate::vocabulary::tests::namecon;

    fn lit(s: &str) -> Segment {
        Segment::Literal(s.into())
    }

    fn r(g: &str, k: &str) -> Segment {
        Segment::NameconRef {
            guiding: g.into(),
            keyword: k.into(),
        }
    }

    #[test]
    fn bird_example() {
        let p = "<a bird | my_hawk> amidst white flowers";
        let ast = parse(p).unwrap();
        assert_eq!(ast.segments, vec![r("a bird", "my_hawk"), lit(" amidst white flowers")]);
        assert_eq!(ast.stripped(), "a bird amidst white flowers");
        assert_eq!(ast.to_string(), p);
        assert_eq!(ast.spans(), vec![("my_hawk", 0..2)]);
    }

    #[test]
    fn plain_prompt() {
        let ast = parse("plain prompt").unwrap();
        assert_eq!(ast.segments, vec![lit("plain prompt")]);
        assert!(ast.spans().is_empty());
        assert_eq!(parse("").unwrap().segments, vec![]);
    }

    #[test]
    fn whitespace_trimmed_and_multiple_refs() {
        let ast = parse("face of<  a woman|lucy  > with <a bird|my_hawk>").unwrap();
        assert_eq!(
            ast.segments,
            vec![lit("face of"), r("a woman", "lucy"), lit(" with "), r("a bird", "my_hawk")]
        );
        assert_eq!(ast.stripped(), "face of a woman with a bird");
        assert_eq!(ast.spans(), vec![("lucy", 2..4), ("my_hawk", 5..7)]);
        assert_eq!(tokenize(&ast.stripped()), ast.stripped_tokens());
    }

    #[test]
    fn malformed_prompts() {
        let cases = [
            ("<a bird my_hawk>", ParseError::MissingSeparator { start: 0, end: 16 }),
            ("x <a bird | k", ParseError::UnclosedBracket { pos: 2 }),
            ("a > b", ParseError::UnmatchedClose { pos: 2 }),
            ("< | k>", ParseError::EmptyGuiding { pos: 1 }),
            ("<bird | >", ParseError::EmptyKeyword { pos: 7 }),
            ("<a <b | k> | j>", ParseError::NestedBracket { pos: 3 }),
            (
                "<bird | my hawk>",
                ParseError::InvalidKeyword {
                    pos: 7,
                    keyword: "my hawk".into(),
                },
            ),
            (
                "<bird | a | b>",
                ParseError::InvalidKeyword {
                    pos: 7,
                    keyword: "a | b".into(),
                },
            ),
        ];
        for (prompt, expected) in cases {
            assert_eq!(parse(prompt).unwrap_err(), expected, "{prompt}");
        }
        assert_eq!(parse("<ü | k").unwrap_err().position(), 0);
    }

    fn vocab(p: &Pipeline) -> Vocabulary {
        let mut v = Vocabulary::new(p.dim());
        v.insert(namecon("one", 1, p.dim(), 0.1), false).unwrap();
        v.insert(namecon("two", 2, p.dim(), 0.2), false).unwrap();
        v
    }

    #[test]
    fn equal_length_splice_is_local() {
        let p = Pipeline::default();
        let v = vocab(&p);
        let ast = parse("<a bird | two> amidst white flowers").unwrap();
        let base = p.encode(&ast.stripped_tokens()).unwrap();
        let out = substitute(&ast, &base, &v, p.pad_embedding(), 8).unwrap();
        assert_eq!(out.row(0), v.get("two").unwrap().embeddings[0].as_slice());
        assert_eq!(out.row(1), v.get("two").unwrap().embeddings[1].as_slice());
        for i in 2..8 {
            assert_eq!(out.row(i), base.row(i));
        }
        assert_eq!(out.slots(), base.slots());
    }

    #[test]
    fn no_refs_is_identity() {
        let p = Pipeline::default();
        let ast = parse("a yellow hawk amidst white flowers").unwrap();
        let base = p.encode(&ast.stripped_tokens()).unwrap();
        assert_eq!(substitute(&ast, &base, &Vocabulary::new(32), p.pad_embedding(), 8).unwrap(), base);
    }

    #[test]
    fn shift_and_overflow() {
        let p = Pipeline::default();
        let v = vocab(&p);
        // A one-row namecon over a two-token span pulls later rows forward.
        let ast = parse("<a bird | one> amidst white flowers").unwrap();
        let base = p.encode(&ast.stripped_tokens()).unwrap();
        let out = substitute(&ast, &base, &v, p.pad_embedding(), 8).unwrap();
        assert_eq!(out.occupied(), 4);
        assert_eq!(out.row(1), base.row(2));
        assert_eq!(out.slots()[..4], [Slot::Object, Slot::Connective, Slot::Surroundings, Slot::Surroundings]);
        assert_eq!(out.row(4), p.pad_embedding());

        let ast = parse("<a | two> <a | two> <a | two> <a | two> a").unwrap();
        let base = p.encode(&ast.stripped_tokens()).unwrap();
        assert!(matches!(
            substitute(&ast, &base, &v, p.pad_embedding(), 8),
            Err(PromptError::Pipeline(PipelineError::TooLong { len: 9, max: 8 }))
        ));
    }

    #[test]
    fn repeated_keyword_substitutes_every_occurrence() {
        let p = Pipeline::default();
        let v = vocab(&p);
        let e = embed(&p, "<bird | one> with <woman | one>", &v).unwrap();
        let one = &v.get("one").unwrap().embeddings[0];
        assert_eq!(e.row(0), one.as_slice());
        assert_eq!(e.row(2), one.as_slice());
        assert_eq!(e.occupied(), 3);
    }

    #[test]
    fn unknown_keyword() {
        let p = Pipeline::default();
        let err = generate(&p, "<a bird | nobody> amidst white flowers", &vocab(&p), 0).unwrap_err();
        assert_eq!(err, PromptError::UnknownKeyword("nobody".into()));
    }

    #[test]
    fn plain_generation_matches_pipeline() {
        let p = Pipeline::default();
        let prompt = "a yellow hawk amidst white flowers";
        let direct = p.decode(&p.encode_text(prompt).unwrap(), 5).unwrap();
        assert_eq!(generate(&p, prompt, &Vocabulary::new(32), 5).unwrap(), direct);
    }

    #[test]
    fn guiding_concept_shapes_context() {
        let p = Pipeline::default();
        let v = vocab(&p);
        let a = embed(&p, "<a bird | two> amidst white flowers", &v).unwrap();
        let b = embed(&p, "<an armor | two> amidst white flowers", &v);
        assert!(matches!(b, Err(PromptError::Pipeline(PipelineError::UnknownToken(_)))));
        let b = embed(&p, "<fiery armor | two> amidst white flowers", &v).unwrap();
        assert_eq!(a.row(0), b.row(0));
        for i in 2..5 {
            assert_ne!(a.row(i), b.row(i));
        }
    }
}
