//! Word-level pre-tokenization and vocabularies shared by the prompt
//! formats and the model backends.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Angle-bracket specials stay atomic; words; any other non-space char.
    RE.get_or_init(|| Regex::new(r"<[A-Za-z0-9_]+>|\w+|[^\w\s]").unwrap())
}

/// Splits text into word and punctuation tokens.
pub fn pretokenize(text: &str) -> Vec<&str> {
    token_regex().find_iter(text).map(|m| m.as_str()).collect()
}

/// Like [`pretokenize`] but returns byte spans into `text`.
pub fn token_spans(text: &str) -> Vec<Range<usize>> {
    token_regex().find_iter(text).map(|m| m.range()).collect()
}

pub fn token_count(text: &str) -> usize {
    token_regex().find_iter(text).count()
}

/// Token vocabulary with the five reserved specials at fixed ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const PAD_ID: u32 = 0;
    pub const BOS_ID: u32 = 1;
    pub const EOS_ID: u32 = 2;
    pub const UNK_ID: u32 = 3;
    pub const MASK_ID: u32 = 4;

    /// Builds a vocabulary from the pre-tokens of `texts`, in first-seen order.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK, MASK].iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for text in texts {
            for tok in pretokenize(text) {
                if !index.contains_key(tok) {
                    index.insert(tok.to_string(), tokens.len() as u32);
                    tokens.push(tok.to_string());
                }
            }
        }
        Self { tokens, index }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
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

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pretokenize(text).into_iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces, dropping specials other than unk/mask.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, Self::PAD_ID | Self::BOS_ID | Self::EOS_ID))
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_keeps_specials() {
        assert_eq!(
            pretokenize("contradiction explanation: a <mask> runs."),
            vec!["contradiction", "explanation", ":", "a", "<mask>", "runs", "."]
        );
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = Vocab::build(["a b c"]);
        assert_eq!(v.len(), 8);
        assert_eq!(v.encode("a z"), vec![5, Vocab::UNK_ID]);
        assert_eq!(v.decode(&[Vocab::BOS_ID, 5, 6, Vocab::EOS_ID]), "a b");
    }

    #[test]
    fn decode_then_encode_is_stable() {
        let v = Vocab::build(["premise : a man , sleeping ."]);
        let ids = v.encode("a man , sleeping .");
        assert_eq!(v.encode(&v.decode(&ids)), ids);
    }
}
