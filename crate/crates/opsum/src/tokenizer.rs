//! Reversible whitespace tokenizer with a corpus-built vocabulary.
//!
//! Texts are split on single spaces (the corpus loader already collapses
//! whitespace), so `decode(encode(text)) == text` whenever every word is in
//! vocabulary. Ids 0..=4 are reserved sentinels.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<sep>", "<unk>"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab
    }
}

impl Tokenizer {
    /// Builds a vocabulary from every word in the given texts, sorted for
    /// determinism, after the reserved sentinels.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for w in t.split(' ').filter(|w| !w.is_empty()) {
                words.insert(w.to_string());
            }
        }
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(words);
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Tokenizer { vocab, index }
    }

    /// Restores the word index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Joins non-sentinel tokens with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS && id != SEP)
            .map(|&id| self.vocab.get(id as usize).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token sequences for one model input. Every present source starts with
/// `<s>` and ends with `</s>`; an absent source is the one-token `<pad>`
/// sequence whose mask is all false.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSources {
    pub review_tokens: Vec<u32>,
    pub description_tokens: Vec<u32>,
    pub qa_tokens: Vec<u32>,
    /// Target `<s> ... </s>` when training; absent at inference.
    pub target_tokens: Option<Vec<u32>>,
}

/// Maximum sequence lengths per source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceLimits {
    pub max_review_len: usize,
    pub max_desc_len: usize,
    pub max_qa_len: usize,
    pub max_tgt_len: usize,
}

/// Wraps body tokens with `<s>`/`</s>`, truncating the body from the tail
/// so the result fits `max_len`.
fn frame(mut body: Vec<u32>, max_len: usize) -> Vec<u32> {
    assert!(max_len >= 2, "sources need room for the sentinels");
    body.truncate(max_len - 2);
    let mut out = Vec::with_capacity(body.len() + 2);
    out.push(BOS);
    out.extend(body);
    out.push(EOS);
    out
}

fn join_with_sep(tok: &Tokenizer, texts: &[String]) -> Vec<u32> {
    let mut out = Vec::new();
    for (i, t) in texts.iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.extend(tok.encode(t));
    }
    out
}

/// Tokenizes the three sources of one instance. Reviews are joined with the
/// separator token in the given order. An absent description or empty QA
/// list becomes the pad sequence.
pub fn tokenize_sources(
    tok: &Tokenizer,
    limits: &SourceLimits,
    reviews: &[String],
    description: Option<&str>,
    qa: &[String],
    target: Option<&str>,
) -> TokenizedSources {
    let review_tokens = frame(join_with_sep(tok, reviews), limits.max_review_len);
    let description_tokens = match description {
        Some(d) if !d.is_empty() => frame(tok.encode(d), limits.max_desc_len),
        _ => vec![PAD],
    };
    let qa_tokens = if qa.is_empty() {
        vec![PAD]
    } else {
        frame(join_with_sep(tok, qa), limits.max_qa_len)
    };
    let target_tokens = target.map(|t| frame(tok.encode(t), limits.max_tgt_len));
    TokenizedSources {
        review_tokens,
        description_tokens,
        qa_tokens,
        target_tokens,
    }
}

/// Concatenates the three sources into the single-encoder input
/// `reviews ++ <sep> ++ description ++ <sep> ++ qa`, in that fixed order.
/// Absent sources contribute nothing between their separators.
pub fn concat_sources(
    tok: &Tokenizer,
    max_src_len: usize,
    reviews: &[String],
    description: Option<&str>,
    qa: &[String],
) -> Vec<u32> {
    let mut body = join_with_sep(tok, reviews);
    body.push(SEP);
    if let Some(d) = description {
        if !d.is_empty() {
            body.extend(tok.encode(d));
        }
    }
    body.push(SEP);
    body.extend(join_with_sep(tok, qa));
    frame(body, max_src_len)
}

/// True where the token participates in attention (everything but `<pad>`).
pub fn token_mask(tokens: &[u32]) -> Vec<bool> {
    tokens.iter().map(|&t| t != PAD).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let tok = Tokenizer::build(["the grip is solid", "a bit heavy"]);
        let text = "the grip is a bit heavy";
        assert_eq!(tok.decode(&tok.encode(text)), text);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let tok = Tokenizer::build(["known words"]);
        let ids = tok.encode("known mystery");
        assert_eq!(ids[1], UNK);
    }

    #[test]
    fn sources_carry_sentinels_and_absent_becomes_pad() {
        let tok = Tokenizer::build(["a b c"]);
        let limits = SourceLimits {
            max_review_len: 16,
            max_desc_len: 16,
            max_qa_len: 16,
            max_tgt_len: 16,
        };
        let src = tokenize_sources(&tok, &limits, &["a b".to_string()], None, &[], Some("c"));
        assert_eq!(src.review_tokens.first(), Some(&BOS));
        assert_eq!(src.review_tokens.last(), Some(&EOS));
        assert_eq!(src.description_tokens, vec![PAD]);
        assert_eq!(src.qa_tokens, vec![PAD]);
        let tgt = src.target_tokens.unwrap();
        assert_eq!(tgt, vec![BOS, tok.encode("c")[0], EOS]);
    }

    #[test]
    fn reviews_joined_with_separator_and_truncated_from_tail() {
        let tok = Tokenizer::build(["w0 w1 w2 w3 w4 w5"]);
        let limits = SourceLimits {
            max_review_len: 6,
            max_desc_len: 8,
            max_qa_len: 8,
            max_tgt_len: 8,
        };
        let src = tokenize_sources(
            &tok,
            &limits,
            &["w0 w1".to_string(), "w2 w3 w4".to_string()],
            None,
            &[],
            None,
        );
        // BOS + 4 body tokens + EOS: w0 w1 <sep> w2 survive.
        assert_eq!(src.review_tokens.len(), 6);
        assert_eq!(src.review_tokens[3], SEP);
    }

    #[test]
    fn concat_keeps_fixed_source_order() {
        let tok = Tokenizer::build(["r d q"]);
        let with_desc = concat_sources(&tok, 32, &["r".to_string()], Some("d"), &["q".to_string()]);
        let without = concat_sources(&tok, 32, &["r".to_string()], None, &["q".to_string()]);
        assert_ne!(with_desc, without);
        // Both carry exactly two separators between the three sections.
        let seps = |v: &[u32]| v.iter().filter(|&&t| t == SEP).count();
        assert_eq!(seps(&with_desc), 2);
        assert_eq!(seps(&without), 2);
    }

    #[test]
    fn serde_round_trip_restores_index() {
        let tok = Tokenizer::build(["alpha beta"]);
        let json = serde_json::to_string(&tok).unwrap();
        let mut back: Tokenizer = serde_json::from_str(&json).unwrap();
        back.rebuild_index();
        assert_eq!(back.encode("alpha beta"), tok.encode("alpha beta"));
    }
}
