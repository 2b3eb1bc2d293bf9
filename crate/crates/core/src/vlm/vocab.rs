use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed whitespace vocabulary built from the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

/// Lowercases and splits on whitespace; commas, periods, colons and similar
/// punctuation act as separators.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || matches!(c, ',' | '.' | ':' | ';' | '?' | '!' | '(' | ')' | '"'))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

impl Vocabulary {
    /// Builds a sorted vocabulary from every token appearing in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        Self::from_tokens(set.into_iter().collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
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
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Err(Error::input(format!("text {text:?} has no tokens")));
        }
        toks.iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::input(format!("unknown token {t:?} in {text:?}")))
            })
            .collect()
    }

    pub fn covers(&self, text: &str) -> bool {
        let toks = tokenize(text);
        !toks.is_empty() && toks.iter().all(|t| self.index.contains_key(t))
    }

    /// Re-creates the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_on_commas() {
        assert_eq!(
            tokenize("A photo of a dog, which has Wheels"),
            vec!["a", "photo", "of", "a", "dog", "which", "has", "wheels"]
        );
    }

    #[test]
    fn unknown_token_is_an_input_error() {
        let v = Vocabulary::from_texts(["a photo of a dog"]);
        assert!(matches!(v.encode("a photo of a cat"), Err(Error::Input(_))));
        assert_eq!(v.encode("a dog").unwrap().len(), 2);
    }
}
