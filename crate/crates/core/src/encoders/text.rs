use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CloverError, Result};
use crate::masking::{Lexicon, PosTag, AUX_STOPLIST};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
const SPECIALS: [&str; 3] = ["[PAD]", "[CLS]", "[MASK]"];

/// Closed word vocabulary: specials, then lexicon words, then auxiliaries.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
    lexicon: Lexicon,
}

impl Vocab {
    pub fn from_lexicon(lexicon: Lexicon) -> Self {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in lexicon.words().chain(AUX_STOPLIST.iter().copied()) {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab {
            words,
            ids,
            lexicon,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    /// `[CLS] w1 … wn`, optionally right-padded with `[PAD]` to `pad_to` tokens.
    pub fn encode<S: AsRef<str>>(
        &self,
        words: &[S],
        pad_to: Option<usize>,
    ) -> Result<TokenizedText> {
        let mut ids = vec![CLS];
        let mut tags = vec![PosTag::Special];
        for w in words {
            let w = w.as_ref();
            ids.push(
                self.id(w)
                    .ok_or_else(|| CloverError::UnknownToken(w.to_string()))?,
            );
            tags.push(self.lexicon.tag(w));
        }
        if let Some(n) = pad_to {
            if ids.len() > n {
                return Err(CloverError::invalid(
                    "text",
                    format!("{} tokens exceed the maximum of {n}", ids.len()),
                ));
            }
            ids.resize(n, PAD);
            tags.resize(n, PosTag::Special);
        }
        Ok(TokenizedText { ids, tags })
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("[?]").to_string())
            .collect()
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::from_lexicon(Lexicon::default())
    }
}

/// Token ids with per-token tags; `[CLS]` first, `[PAD]` only as a suffix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    pub tags: Vec<PosTag>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Tokens before the padding suffix.
    pub fn valid_len(&self) -> usize {
        self.ids
            .iter()
            .rposition(|&i| i != PAD)
            .map_or(0, |p| p + 1)
    }

    /// Drops the padding suffix.
    pub fn truncated(&self) -> TokenizedText {
        let n = self.valid_len();
        TokenizedText {
            ids: self.ids[..n].to_vec(),
            tags: self.tags[..n].to_vec(),
        }
    }

    pub fn padded(&self, n: usize) -> TokenizedText {
        let mut t = self.clone();
        t.ids.resize(n.max(t.ids.len()), PAD);
        t.tags.resize(t.ids.len(), PosTag::Special);
        t
    }

    pub fn validate(&self, vocab_size: usize, max_len: usize) -> Result<()> {
        if self.ids.len() != self.tags.len() {
            return Err(CloverError::invalid(
                "text",
                "ids and tags differ in length",
            ));
        }
        if self.ids.first() != Some(&CLS) {
            return Err(CloverError::invalid("text", "index 0 must be [CLS]"));
        }
        if self.ids.len() > max_len {
            return Err(CloverError::invalid(
                "text",
                format!("length {} exceeds the maximum of {max_len}", self.ids.len()),
            ));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= vocab_size) {
            return Err(CloverError::UnknownTokenId(bad));
        }
        let valid = self.valid_len();
        if self.ids[..valid].contains(&PAD) {
            return Err(CloverError::invalid(
                "text",
                "[PAD] may only appear as a suffix",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_prepends_cls_and_pads() {
        let v = Vocab::default();
        let t = v.encode(&["a", "red", "square"], Some(6)).unwrap();
        assert_eq!(t.ids[0], CLS);
        assert_eq!(t.len(), 6);
        assert_eq!(t.valid_len(), 4);
        assert_eq!(&t.ids[4..], &[PAD, PAD]);
        assert_eq!(t.tags[2], PosTag::Adj);
        assert_eq!(t.tags[3], PosTag::Noun);
        t.validate(v.len(), 12).unwrap();
    }

    #[test]
    fn unknown_word_is_rejected() {
        let v = Vocab::default();
        assert!(matches!(
            v.encode(&["zebra"], None),
            Err(CloverError::UnknownToken(_))
        ));
    }

    #[test]
    fn interior_padding_is_rejected() {
        let t = TokenizedText {
            ids: vec![CLS, PAD, 5],
            tags: vec![PosTag::Special; 3],
        };
        assert!(t.validate(100, 12).is_err());
    }

    #[test]
    fn vocabulary_is_small_and_covers_auxiliaries() {
        let v = Vocab::default();
        assert!(v.len() < 96, "{}", v.len());
        assert!(v.id("should").is_some());
        assert_eq!(v.word(MASK), Some("[MASK]"));
    }
}
