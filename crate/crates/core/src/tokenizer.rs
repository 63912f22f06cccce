//! Word-level tokenizer: lowercase, split on whitespace, punctuation as
//! single-character tokens.

use std::collections::{BTreeSet, HashMap};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SEP: usize = 4;
pub const QUERY_MARK: usize = 5;
pub const PASSAGE_MARK: usize = 6;

pub const SPECIAL_TOKENS: [&str; 7] = ["<pad>", "<unk>", "<s>", "</s>", "[SEP]", "<query>", "<passage>"];

/// Marker placed between turns by context assembly. [`Tokenizer::encode_turns`]
/// maps it to [`SEP`]; plain [`Tokenizer::tokenize`] never does.
pub const TURN_SEPARATOR: &str = "[SEP]";

/// Splits text into lowercase word and punctuation tokens. Special token ids
/// can never come out of this: `<query>` splits into `<`, `query`, `>`.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("vocabulary must start with the special tokens {SPECIAL_TOKENS:?}")]
    MissingSpecials,
    #[error("duplicate vocabulary entry {0:?}")]
    Duplicate(String),
}

impl Tokenizer {
    /// Builds a vocabulary from every word in `texts`, sorted, after the
    /// special tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(split_words(t));
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !SPECIAL_TOKENS.contains(&w.as_str())));
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(TokenizerError::MissingSpecials);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(TokenizerError::Duplicate(t.clone()));
            }
        }
        Ok(Self { tokens, index })
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

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    fn word_id(&self, w: &str) -> usize {
        match self.index.get(w) {
            Some(&i) if i >= SPECIAL_TOKENS.len() => i,
            _ => UNK,
        }
    }

    /// Word ids of `text`, truncated to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        split_words(text)
            .iter()
            .take(max_len)
            .map(|w| self.word_id(w))
            .collect()
    }

    /// Like [`Tokenizer::tokenize`] but maps [`TURN_SEPARATOR`] to [`SEP`].
    pub fn encode_turns(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, seg) in text.split(TURN_SEPARATOR).enumerate() {
            if i > 0 {
                out.push(SEP);
            }
            out.extend(split_words(seg).iter().map(|w| self.word_id(w)));
            if out.len() >= max_len {
                break;
            }
        }
        out.truncate(max_len);
        out
    }

    /// Space-joined tokens, dropping padding and sequence delimiters.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
