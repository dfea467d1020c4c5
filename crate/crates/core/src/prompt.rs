//! Identifier-tagged prompts: `red<1>, blue<2>, on gray background`.
//!
//! A prompt is a comma-separated list of segments. A segment may carry one
//! `<k>` identifier (anywhere inside it) which binds the whole segment to
//! character `k`; untagged segments are shared by every character. See
//! `docs/prompt-grammar.md` for the full grammar.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::EmbedRow;
use crate::error::{PromptError, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAX_TOKENS: usize = 16;
pub const TEXT_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    /// Text with the identifier removed and whitespace collapsed.
    pub text: String,
    pub id: Option<u32>,
    /// Byte offset of the segment in the raw prompt.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedPrompt {
    pub raw: String,
    pub segments: Vec<Segment>,
}

impl TaggedPrompt {
    pub fn has_identifiers(&self) -> bool {
        self.segments.iter().any(|s| s.id.is_some())
    }

    /// Every segment, identifiers stripped, in original order.
    pub fn plain(&self) -> String {
        join(self.segments.iter())
    }

    pub fn max_id(&self) -> Option<u32> {
        self.segments.iter().filter_map(|s| s.id).max()
    }
}

fn join<'a>(segments: impl Iterator<Item = &'a Segment>) -> String {
    segments.map(|s| s.text.as_str()).collect::<Vec<_>>().join(", ")
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parse a raw prompt into segments.
pub fn parse_prompt(raw: &str) -> Result<TaggedPrompt, PromptError> {
    let mut segments = Vec::new();
    let mut seen: HashMap<u32, usize> = HashMap::new();
    let mut offset = 0;
    for piece in raw.split(',') {
        let start = offset;
        offset += piece.len() + 1;
        let mut text = String::with_capacity(piece.len());
        let mut id = None;
        let mut rest = piece;
        let mut cursor = start;
        while let Some(open) = rest.find('<') {
            text.push_str(&rest[..open]);
            let at = cursor + open;
            let after = &rest[open + 1..];
            let digits = after.bytes().take_while(u8::is_ascii_digit).count();
            if digits == 0 || after.as_bytes().get(digits) != Some(&b'>') {
                return Err(PromptError::MalformedIdentifier { position: at });
            }
            let k: u32 = after[..digits]
                .parse()
                .map_err(|_| PromptError::MalformedIdentifier { position: at })?;
            if k == 0 {
                return Err(PromptError::ZeroId { position: at });
            }
            if id.is_some() {
                return Err(PromptError::MultipleIdentifiers { position: start });
            }
            if seen.insert(k, at).is_some() {
                return Err(PromptError::DuplicateId { id: k, position: at });
            }
            id = Some(k);
            text.push(' ');
            let consumed = open + 1 + digits + 1;
            rest = &rest[consumed..];
            cursor += consumed;
        }
        text.push_str(rest);
        let text = collapse_whitespace(&text);
        if text.is_empty() {
            if id.is_some() {
                return Err(PromptError::EmptySegment { position: start });
            }
            continue;
        }
        segments.push(Segment { text, id, position: start });
    }
    Ok(TaggedPrompt { raw: raw.to_owned(), segments })
}

/// One prompt per character, index `k - 1` for identifier `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPrompt {
    pub prompts: Vec<String>,
}

impl SplitPrompt {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Character `k` receives its own segments plus every shared segment, in
/// original order. Without identifiers everyone gets the full prompt.
pub fn split_prompt(tagged: &TaggedPrompt, n_characters: usize) -> Result<SplitPrompt, PromptError> {
    if let Some(k) = tagged.max_id().filter(|&k| k as usize > n_characters) {
        return Err(PromptError::UnknownCharacter { id: k, n: n_characters });
    }
    let prompts = (1..=n_characters as u32)
        .map(|k| join(tagged.segments.iter().filter(|s| s.id.is_none() || s.id == Some(k))))
        .collect();
    Ok(SplitPrompt { prompts })
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Words with learned embedding rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let words: Vec<String> = words.iter().map(|w| w.as_ref().to_lowercase()).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Words of the synthetic benchmark captions plus a few common fillers.
    pub fn toy() -> Self {
        Self::new(&[
            "red", "green", "blue", "yellow", "on", "gray", "grey", "background", "a", "an",
            "the", "and", "in", "with", "figure", "person", "character", "walking", "park",
        ])
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// FNV-1a 64-bit.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic vector for a token outside the vocabulary.
pub fn fallback_vector<T: Scalar>(token: &str, dim: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64_lossy(z * scale)
        })
        .collect()
}

/// Embedding rows of a prompt: table rows for known words, hashed vectors
/// otherwise, truncated to `MAX_TOKENS` and padded. Returns the rows and the
/// number of real tokens.
pub fn token_rows<T: Scalar>(prompt: &str, vocab: &Vocabulary, dim: usize) -> Result<(Vec<EmbedRow<T>>, usize), PromptError> {
    let tokens = tokenize(prompt);
    if tokens.is_empty() {
        return Err(PromptError::EmptyPrompt);
    }
    let count = tokens.len().min(MAX_TOKENS);
    let mut rows: Vec<EmbedRow<T>> = tokens[..count]
        .iter()
        .map(|t| match vocab.get(t) {
            Some(i) => EmbedRow::Table(i),
            None => EmbedRow::Fixed(fallback_vector(t, dim)),
        })
        .collect();
    rows.resize(MAX_TOKENS, EmbedRow::Pad);
    Ok((rows, count))
}

/// A `[MAX_TOKENS, dim]` embedding matrix and its token count.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding<T: Scalar = f32> {
    pub matrix: Tensor<T>,
    pub tokens: usize,
}

/// Embed a prompt against a `[vocab, dim]` table.
pub fn tokenize_embed<T: Scalar>(prompt: &str, vocab: &Vocabulary, table: &Tensor<T>) -> Result<TextEmbedding<T>> {
    let dim = table.dims()[1];
    let (rows, tokens) = token_rows::<T>(prompt, vocab, dim)?;
    let mut data = Vec::with_capacity(MAX_TOKENS * dim);
    for row in rows {
        match row {
            EmbedRow::Table(i) => data.extend_from_slice(&table.data()[i * dim..(i + 1) * dim]),
            EmbedRow::Fixed(v) => data.extend(v),
            EmbedRow::Pad => data.extend(std::iter::repeat(T::zero()).take(dim)),
        }
    }
    Ok(TextEmbedding { matrix: Tensor::new(vec![MAX_TOKENS, dim], data)?, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(text: &str, id: Option<u32>) -> (String, Option<u32>) {
        (text.to_owned(), id)
    }

    fn shape(p: &TaggedPrompt) -> Vec<(String, Option<u32>)> {
        p.segments.iter().map(|s| (s.text.clone(), s.id)).collect()
    }

    #[test]
    fn worked_example() {
        let p = parse_prompt("Trump<1>, Biden<2>, in a park").unwrap();
        assert_eq!(shape(&p), vec![seg("Trump", Some(1)), seg("Biden", Some(2)), seg("in a park", None)]);
        let s = split_prompt(&p, 2).unwrap();
        assert_eq!(s.prompts, vec!["Trump, in a park", "Biden, in a park"]);
    }

    #[test]
    fn identifier_free_fallback() {
        let p = parse_prompt("a dog, on grass").unwrap();
        assert!(!p.has_identifiers());
        assert_eq!(split_prompt(&p, 2).unwrap().prompts, vec!["a dog, on grass"; 2]);
    }

    #[test]
    fn identifier_binds_whole_segment() {
        let p = parse_prompt("a <2> tall   man, sky").unwrap();
        assert_eq!(shape(&p), vec![seg("a tall man", Some(2)), seg("sky", None)]);
        assert_eq!(split_prompt(&p, 2).unwrap().prompts, vec!["sky", "a tall man, sky"]);
    }

    #[test]
    fn typed_errors() {
        assert_eq!(parse_prompt("cat<1>, cat<1>"), Err(PromptError::DuplicateId { id: 1, position: 11 }));
        assert_eq!(parse_prompt("cat<x>"), Err(PromptError::MalformedIdentifier { position: 3 }));
        assert_eq!(parse_prompt("cat<1"), Err(PromptError::MalformedIdentifier { position: 3 }));
        assert_eq!(parse_prompt("cat<0>"), Err(PromptError::ZeroId { position: 3 }));
        assert_eq!(parse_prompt("x, a<1> b<2>"), Err(PromptError::MultipleIdentifiers { position: 2 }));
        assert_eq!(parse_prompt("dog, <1>"), Err(PromptError::EmptySegment { position: 4 }));
        assert_eq!(
            parse_prompt("cat<99999999999>"),
            Err(PromptError::MalformedIdentifier { position: 3 })
        );
        let p = parse_prompt("cat<3>, park").unwrap();
        assert_eq!(split_prompt(&p, 2), Err(PromptError::UnknownCharacter { id: 3, n: 2 }));
    }

    #[test]
    fn empty_segments_are_dropped() {
        let p = parse_prompt(" , red,,  ").unwrap();
        assert_eq!(shape(&p), vec![seg("red", None)]);
        assert!(parse_prompt("").unwrap().segments.is_empty());
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Red-ball, ON gray!"), vec!["red", "ball", "on", "gray"]);
        let v = Vocabulary::toy();
        let table = Tensor::from_fn(vec![v.len(), TEXT_DIM], |i| (i as f32 * 0.37).sin());
        let a = tokenize_embed("red figure", &v, &table).unwrap();
        let b = tokenize_embed("Red Figure", &v, &table).unwrap();
        assert!(a.matrix.bits_eq(&b.matrix));
        let c = tokenize_embed("zebra unicorn", &v, &table).unwrap();
        let d = tokenize_embed("zebra unicorn", &v, &table).unwrap();
        assert!(c.matrix.bits_eq(&d.matrix));
        assert_eq!(c.tokens, 2);
        assert!(c.matrix.data()[2 * TEXT_DIM..].iter().all(|&x| x == 0.0));
        assert!(matches!(
            tokenize_embed::<f32>(" ,;", &v, &table),
            Err(crate::Error::Prompt(PromptError::EmptyPrompt))
        ));
    }

    #[test]
    fn truncation_to_max_tokens() {
        let v = Vocabulary::toy();
        let table: Tensor = Tensor::ones(vec![v.len(), TEXT_DIM]);
        let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let e = tokenize_embed(&words.join(" "), &v, &table).unwrap();
        assert_eq!(e.tokens, MAX_TOKENS);
        let nonzero_rows = e.matrix.data().chunks(TEXT_DIM).filter(|r| r.iter().any(|&x| x != 0.0)).count();
        assert_eq!(nonzero_rows, MAX_TOKENS);
    }

    fn words_of(s: &str) -> Vec<String> {
        let mut w = tokenize(s);
        w.sort();
        w
    }

    proptest! {
        #[test]
        fn parser_never_panics(raw in "[a-z<>0-9, ]{0,40}") {
            let _ = parse_prompt(&raw);
        }

        #[test]
        fn total_without_brackets(raw in "[^<]{0,60}") {
            prop_assert!(parse_prompt(&raw).is_ok());
        }

        #[test]
        fn split_preserves_words(
            tagged in proptest::collection::vec(("[a-z]{1,6}( [a-z]{1,6}){0,2}", 1u32..4), 0..3),
            shared in proptest::collection::vec("[a-z]{1,6}", 0..3),
            n in 3usize..5,
        ) {
            let mut used = std::collections::BTreeSet::new();
            let tagged: Vec<_> = tagged.into_iter().filter(|(_, k)| used.insert(*k)).collect();
            let mut parts: Vec<String> = tagged.iter().map(|(t, k)| format!("{t}<{k}>")).collect();
            parts.extend(shared.iter().cloned());
            let p = parse_prompt(&parts.join(", ")).unwrap();
            let s = split_prompt(&p, n).unwrap();
            prop_assert_eq!(s.len(), n);
            let shared_words = words_of(&shared.join(" "));
            if tagged.is_empty() {
                for q in &s.prompts {
                    prop_assert_eq!(words_of(q), shared_words.clone());
                }
            } else {
                let mut own = Vec::new();
                for (k, q) in s.prompts.iter().enumerate() {
                    let mut w = words_of(q);
                    for sw in &shared_words {
                        let pos = w.iter().position(|x| x == sw);
                        prop_assert!(pos.is_some());
                        w.remove(pos.unwrap());
                    }
                    let expect = tagged.iter().find(|(_, id)| *id as usize == k + 1).map(|(t, _)| words_of(t)).unwrap_or_default();
                    prop_assert_eq!(&w, &expect);
                    own.extend(w);
                }
                own.sort();
                let all_tagged = words_of(&tagged.iter().map(|(t, _)| t.as_str()).collect::<Vec<_>>().join(" "));
                prop_assert_eq!(own, all_tagged);
            }
        }
    }
}
