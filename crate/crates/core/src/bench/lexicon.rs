// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level vocabulary for templated prompts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token strings indexed by id. Text is split on whitespace and every ASCII
/// punctuation character becomes its own token, so `"image?"` encodes as
/// `["image", "?"]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Lexicon {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl From<Vec<String>> for Lexicon {
    fn from(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Lexicon { tokens, ids }
    }
}

impl From<Lexicon> for Vec<String> {
    fn from(l: Lexicon) -> Self {
        l.tokens
    }
}

/// Whitespace/punctuation split used by [`Lexicon::encode`].
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in word.char_indices() {
            if c.is_ascii_punctuation() && !is_inner(word, i) {
                if start < i {
                    out.push(&word[start..i]);
                }
                out.push(&word[i..i + 1]);
                start = i + 1;
            }
        }
        if start < word.len() {
            out.push(&word[start..]);
        }
    }
    out
}

/// Apostrophes, hyphens and angle-bracketed markers stay inside words.
fn is_inner(word: &str, i: usize) -> bool {
    let c = word.as_bytes()[i];
    let bracketed = word.starts_with('<') && word.ends_with('>');
    bracketed || ((c == b'\'' || c == b'-') && i > 0 && i + 1 < word.len())
}

impl Lexicon {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let lex = Lexicon::from(tokens);
        if lex.ids.len() != lex.tokens.len() {
            return Err(Error::Validation("lexicon contains duplicate tokens".into()));
        }
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Validation(format!("token `{token}` is not in the lexicon")))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        split_words(text).into_iter().map(|w| self.id(w)).collect()
    }

    /// Tokens joined by single spaces; unknown ids render as `<id>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        self.decode_words(ids).join(" ")
    }

    pub fn decode_words(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).map_or_else(|| format!("<{i}>"), str::to_string))
            .collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Lexicon::new(tokens)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.tokens).expect("strings serialize");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
