//! Closed word-level vocabulary and exact-round-trip tokenization.
//!
//! Text is segmented into pieces by character class, with a single leading
//! space absorbed into the following word (so `" the"` and `"The"` are
//! different pieces). Decoding is plain concatenation, which makes
//! `decode(encode(s)) == s` hold exactly for any in-vocabulary string.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::LmError;

pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

/// Token ids of a sequence plus the index separating the prompt region from
/// the completion region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub boundary: usize,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, boundary: usize) -> Result<Self, LmError> {
        if boundary > ids.len() {
            return Err(LmError::InvalidBoundary {
                boundary,
                len: ids.len(),
            });
        }
        Ok(TokenSeq { ids, boundary })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn completion_len(&self) -> usize {
        self.ids.len() - self.boundary
    }

    pub fn completion(&self) -> &[TokenId] {
        &self.ids[self.boundary..]
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Splits text into vocabulary pieces: `word`, `␣word`, or a single
/// non-word character. Pure function of the text, independent of the vocab.
pub fn segment(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = i;
        if chars[i] == ' ' && i + 1 < chars.len() && is_word_char(chars[i + 1]) {
            i += 1;
        }
        if is_word_char(chars[i]) {
            while i < chars.len() && is_word_char(chars[i]) {
                i += 1;
            }
        } else {
            i += 1;
        }
        pieces.push(chars[start..i].iter().collect());
    }
    pieces
}

impl Vocab {
    /// Builds the vocabulary over every piece occurring in `texts`, plus the
    /// three special markers. Token ids are dense and deterministic: specials
    /// first, then content pieces in lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut pieces: BTreeSet<String> = BTreeSet::new();
        for t in texts {
            pieces.extend(segment(t));
        }
        let mut tokens = vec![BOS.to_string(), EOS.to_string(), PAD.to_string()];
        tokens.extend(pieces);
        let mut vocab = Vocab {
            tokens,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        0
    }

    pub fn eos(&self) -> TokenId {
        1
    }

    pub fn pad(&self) -> TokenId {
        2
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < 3
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    /// Encodes text as a prompt-only `TokenSeq` (boundary at the end).
    pub fn encode(&self, text: &str) -> Result<TokenSeq, LmError> {
        let mut ids = Vec::new();
        for piece in segment(text) {
            match self.index.get(&piece) {
                Some(&id) => ids.push(id),
                None => return Err(LmError::UnknownToken(piece)),
            }
        }
        let boundary = ids.len();
        TokenSeq::new(ids, boundary)
    }

    /// Concatenates the pieces for `ids`, skipping special markers.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !self.is_special(id))
            .map(|&id| self.tokens[id as usize].as_str())
            .collect()
    }

    /// Consistency check used when loading checkpoints.
    pub fn validate(&self) -> Result<(), LmError> {
        if self.tokens.len() < 4 {
            return Err(LmError::InvalidVocab("vocabulary too small".into()));
        }
        if self.tokens[0] != BOS || self.tokens[1] != EOS || self.tokens[2] != PAD {
            return Err(LmError::InvalidVocab("special markers misplaced".into()));
        }
        let distinct: BTreeSet<&String> = self.tokens.iter().collect();
        if distinct.len() != self.tokens.len() {
            return Err(LmError::InvalidVocab("duplicate tokens".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_vocab() -> Vocab {
        Vocab::build(["All cats are kind.\nSome dogs are not.", "Step 1."])
    }

    #[test]
    fn empty_text_encodes_to_empty_ids() {
        let v = sample_vocab();
        let seq = v.encode("").unwrap();
        assert!(seq.ids.is_empty());
    }

    #[test]
    fn round_trip_is_identity() {
        // a word carries its leading space, so "cats" exists only as " cats"
        let v = sample_vocab();
        for text in ["All cats are kind.", "Some dogs are not.\nStep 1.", "All cats"] {
            let seq = v.encode(text).unwrap();
            assert_eq!(v.decode(&seq.ids), text);
        }
        assert!(v.encode("cats").is_err());
    }

    #[test]
    fn unknown_symbol_is_reported() {
        let v = sample_vocab();
        match v.encode("All zebras are kind.") {
            Err(LmError::UnknownToken(piece)) => assert_eq!(piece, " zebras"),
            other => panic!("expected UnknownToken, got {other:?}"),
        }
    }

    #[test]
    fn specials_are_distinct_and_skipped_in_decode() {
        let v = sample_vocab();
        assert_eq!(v.token(v.bos()), BOS);
        assert_eq!(v.token(v.eos()), EOS);
        assert_eq!(v.token(v.pad()), PAD);
        let mut seq = v.encode("All cats").unwrap();
        seq.ids.insert(0, v.bos());
        seq.ids.push(v.eos());
        assert_eq!(v.decode(&seq.ids), "All cats");
        // text cannot reach the special markers
        assert!(v.encode("<bos>").is_err());
    }

    #[test]
    fn boundary_must_fit() {
        assert!(TokenSeq::new(vec![1, 2, 3], 4).is_err());
        assert!(TokenSeq::new(vec![1, 2, 3], 3).is_ok());
    }
}
