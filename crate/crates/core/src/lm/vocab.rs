//! Word-level tokenizer.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::MASK_PLACEHOLDER;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const AREA_MASK: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<bos>", "<eos>", "<pad>", "<unk>", MASK_PLACEHOLDER];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("duplicate token `{0}`")]
    Duplicate(String),
    #[error("special token `{token}` expected at id {expected}")]
    MisplacedSpecial { token: String, expected: usize },
    #[error("vocabulary json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Splits text into lower-cased word tokens: runs of alphanumerics, single
/// punctuation characters, and the literal mask placeholder.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with(MASK_PLACEHOLDER) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(MASK_PLACEHOLDER.to_string());
            rest = &rest[MASK_PLACEHOLDER.len()..];
            continue;
        }
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Canonical surface form: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then words with `count >= min_count` ordered by count
    /// (descending) and then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self, VocabError> {
        if corpus.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                if !SPECIAL_TOKENS.contains(&tok.as_str()) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        for (id, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*special) {
                return Err(VocabError::MisplacedSpecial { token: special.to_string(), expected: id });
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Out-of-vocabulary words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Inverse of [`encode`](Self::encode) up to normalization; BOS, EOS and PAD are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, BOS | EOS | PAD))
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, VocabError> {
        #[derive(Deserialize)]
        struct Raw {
            tokens: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(json)?;
        Self::from_tokens(raw.tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation_and_mask() {
        assert_eq!(tokenize("In hOc1, layer IV."), vec!["in", "hoc1", ",", "layer", "iv", "."]);
        assert_eq!(tokenize("of [AREA]."), vec!["of", "[AREA]", "."]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn build_orders_by_count_then_name() {
        let v = Vocab::build(&["a b", "a"], 1).unwrap();
        assert_eq!(&v.tokens()[5..], &["a".to_string(), "b".to_string()]);
        let v = Vocab::build(&["c b b a a"], 1).unwrap();
        assert_eq!(&v.tokens()[5..], &["a", "b", "c"]);
    }

    #[test]
    fn min_count_drops_rare_words() {
        let v = Vocab::build(&["a b", "a"], 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.encode("b a"), vec![UNK, 5]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(Vocab::build::<&str>(&[], 1), Err(VocabError::EmptyCorpus)));
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let v = Vocab::build(&["x y z"], 1).unwrap();
        assert_eq!(Vocab::from_json(&v.to_json()).unwrap(), v);
        assert!(Vocab::from_json(r#"{"tokens":["a"]}"#).is_err());
    }
}
