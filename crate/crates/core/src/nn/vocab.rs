use std::collections::HashMap;

use crate::{Error, Result};

/// Prompts are padded (with id 0) or rejected to exactly this many tokens.
pub const PROMPT_LEN: usize = 8;

pub const COLORS: [&str; 3] = ["red", "yellow", "white"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const CATEGORIES: [&str; 5] = ["forest", "ocean", "arid", "mountain", "downtown"];

/// Id 0 is padding; the trailing words are valid but unused by the caption
/// grammar.
const STANDARD: [&str; 24] = [
    "<pad>", "a", "in", "red", "yellow", "white", "circle", "square", "triangle", "forest",
    "ocean", "arid", "mountain", "downtown", "an", "the", "on", "at", "with", "and", "blue",
    "green", "black", "star",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;

    pub fn standard() -> Self {
        Self::from_words(STANDARD.iter().map(|s| s.to_string()).collect())
            .expect("standard vocabulary is valid")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.is_empty() || words.len() > 32 {
            return Err(Error::Model(format!(
                "vocabulary size {} outside [1, 32]",
                words.len()
            )));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Model(format!("duplicate vocabulary word '{w}'")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Splits on whitespace, maps words to ids and pads to [`PROMPT_LEN`].
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(PROMPT_LEN);
        for w in prompt.split_whitespace() {
            let w = w.to_lowercase();
            let id = self
                .id(&w)
                .filter(|&i| i != Self::PAD)
                .ok_or_else(|| Error::Model(format!("unknown token '{w}'")))?;
            ids.push(id);
        }
        if ids.len() > PROMPT_LEN {
            return Err(Error::Model(format!(
                "prompt has {} tokens, at most {PROMPT_LEN} allowed",
                ids.len()
            )));
        }
        ids.resize(PROMPT_LEN, Self::PAD);
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != Self::PAD)
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}
