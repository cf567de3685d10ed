use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CloverError, Result};

/// Coarse part-of-speech classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Verb,
    Adj,
    Aux,
    Other,
    Special,
}

impl PosTag {
    /// Content classes eligible for semantic masking.
    pub fn is_content(self) -> bool {
        matches!(self, PosTag::Noun | PosTag::Verb | PosTag::Adj)
    }
}

impl FromStr for PosTag {
    type Err = CloverError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "NOUN" => PosTag::Noun,
            "VERB" => PosTag::Verb,
            "ADJ" => PosTag::Adj,
            "AUX" => PosTag::Aux,
            "OTHER" => PosTag::Other,
            "SPECIAL" => PosTag::Special,
            other => {
                return Err(CloverError::invalid(
                    "tag",
                    format!("unknown tag `{other}`"),
                ))
            }
        })
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adj => "ADJ",
            PosTag::Aux => "AUX",
            PosTag::Other => "OTHER",
            PosTag::Special => "SPECIAL",
        };
        f.write_str(s)
    }
}

/// Auxiliary verbs. These are never masked, whatever the lexicon says.
pub const AUX_STOPLIST: &[&str] = &[
    "be", "am", "is", "are", "was", "were", "been", "have", "has", "had", "do", "does", "did",
    "will", "would", "shall", "should", "can", "could", "may", "might", "must",
];

const DEFAULT_LEXICON: &str = include_str!("lexicon.tsv");

/// Word → tag table, in file order.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: Vec<(String, PosTag)>,
    index: HashMap<String, PosTag>,
}

impl Lexicon {
    /// Parses `word<TAB>TAG` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut index = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, tag) = line.split_once('\t').ok_or_else(|| {
                CloverError::invalid(
                    "lexicon",
                    format!("line {}: expected word<TAB>TAG", lineno + 1),
                )
            })?;
            let tag: PosTag = tag.trim().parse()?;
            let word = word.trim().to_string();
            if index.insert(word.clone(), tag).is_some() {
                return Err(CloverError::invalid(
                    "lexicon",
                    format!("duplicate word `{word}`"),
                ));
            }
            entries.push((word, tag));
        }
        Ok(Lexicon { entries, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CloverError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(w, _)| w.as_str())
    }

    pub fn get(&self, word: &str) -> Option<PosTag> {
        self.index.get(word).copied()
    }

    /// Tags one lowercase word: auxiliaries, then lexicon hits, then suffix rules.
    pub fn tag(&self, word: &str) -> PosTag {
        if AUX_STOPLIST.contains(&word) {
            return PosTag::Aux;
        }
        if let Some(tag) = self.get(word) {
            return tag;
        }
        if word.ends_with("ing") || word.ends_with("ed") {
            PosTag::Verb
        } else if word.ends_with("ly") {
            PosTag::Other
        } else if word.ends_with("ous") || word.ends_with("ful") || word.ends_with("ive") {
            PosTag::Adj
        } else {
            PosTag::Other
        }
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::parse(DEFAULT_LEXICON).expect("embedded lexicon parses")
    }
}

/// Tags a word sequence with the default lexicon.
pub fn pos_tag<S: AsRef<str>>(words: &[S]) -> Vec<PosTag> {
    let lex = Lexicon::default();
    words.iter().map(|w| lex.tag(w.as_ref())).collect()
}
