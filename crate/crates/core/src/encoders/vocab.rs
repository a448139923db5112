use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Word vocabulary with dense ids; the four special tokens occupy ids 0..4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
    min_frequency: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    min_frequency: usize,
    tokens: Vec<String>,
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            min_frequency: v.min_frequency,
            tokens: v.tokens,
        }
    }
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = crate::Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Self::from_tokens(r.tokens, r.min_frequency)
    }
}

/// Lowercased alphanumeric runs of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

impl Vocabulary {
    /// Build from a corpus, keeping words seen at least `min_frequency` times,
    /// ordered alphabetically after the specials.
    pub fn build<'a, I>(corpus: I, min_frequency: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            counts
                .into_iter()
                .filter(|(_, c)| *c >= min_frequency.max(1))
                .map(|(w, _)| w),
        );
        Self::from_tokens(tokens, min_frequency).expect("built vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            bail!(Validation, "vocabulary must start with the special tokens {:?}", SPECIAL_TOKENS);
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                bail!(Validation, "duplicate vocabulary entry `{}`", t);
            }
        }
        Ok(Self {
            tokens,
            index,
            min_frequency,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }
}

/// `[BOS, words…, EOS, PAD…]` of exactly `context_length` ids; long inputs
/// are truncated so that EOS stays in the last slot.
pub fn tokenize(text: &str, vocab: &Vocabulary, context_length: usize) -> Result<Vec<u32>> {
    if context_length < 2 {
        bail!(Config, "context length {} leaves no room for BOS/EOS", context_length);
    }
    let mut ids = vec![PAD; context_length];
    ids[0] = BOS;
    let mut pos = 1;
    for w in words(text).iter().take(context_length - 2) {
        ids[pos] = vocab.id(w);
        pos += 1;
    }
    ids[pos] = EOS;
    Ok(ids)
}

/// Index of the first EOS.
pub fn eos_position(ids: &[u32]) -> Option<usize> {
    ids.iter().position(|&t| t == EOS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["Water, Sugar", "water; sugar; salt", "SALT and water"], 2)
    }

    #[test]
    fn build_applies_min_frequency() {
        let v = vocab();
        assert_eq!(v.len(), 4 + 3);
        assert_eq!(v.token(4), Some("salt"));
        assert_eq!(v.id("and"), UNK);
        assert_eq!(v.id("<pad>"), PAD);
    }

    #[test]
    fn water_sugar() {
        let v = vocab();
        let ids = tokenize("Water, Sugar", &v, 8).unwrap();
        assert_eq!(ids, vec![BOS, v.id("water"), v.id("sugar"), EOS, PAD, PAD, PAD, PAD]);
    }

    #[test]
    fn empty_text() {
        let ids = tokenize("", &vocab(), 5).unwrap();
        assert_eq!(ids, vec![BOS, EOS, PAD, PAD, PAD]);
    }

    #[test]
    fn long_text_keeps_terminal_eos() {
        let text: Vec<&str> = core::iter::repeat_n("water", 100).collect();
        let ids = tokenize(&text.join(" "), &vocab(), 16).unwrap();
        assert_eq!(ids.len(), 16);
        assert_eq!(ids[15], EOS);
        assert_eq!(ids[0], BOS);
        assert!(ids[1..15].iter().all(|&t| t == vocab().id("water")));
        assert_eq!(eos_position(&ids), Some(15));
    }

    #[test]
    fn serde_repr_rejects_missing_specials() {
        let r = Vocabulary::from_tokens(vec!["a".to_string()], 2);
        assert!(r.is_err());
        let dup = Vocabulary::from_tokens(
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(["x".to_string(), "x".to_string()]).collect(),
            1,
        );
        assert!(dup.is_err());
    }
}
