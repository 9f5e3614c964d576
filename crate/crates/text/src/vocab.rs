//! Token vocabulary and the piece tokenizer.
//!
//! Text is split into pieces by three rules, applied left to right:
//! reserved control tokens (longest match first), maximal runs of ASCII
//! alphanumerics, and single characters for everything else (CJK,
//! punctuation, whitespace). Concatenating the pieces reproduces the input,
//! so decoding an UNK-free encoding gives back the original string.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::TextError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const CLS: u32 = 4;
pub const SEP: u32 = 5;
pub const SPEAKER1: u32 = 6;
pub const SPEAKER2: u32 = 7;
pub const GOAL: u32 = 8;
pub const UNAME: u32 = 9;
pub const MOVIE1: u32 = 10;
pub const MOVIE2: u32 = 11;
pub const STAR1: u32 = 12;
pub const STAR2: u32 = 13;

/// Reserved tokens, in id order. They occupy ids `0..RESERVED.len()`.
pub const RESERVED: [&str; 14] = [
    "[PAD]",
    "[BOS]",
    "[EOS]",
    "[UNK]",
    "[CLS]",
    "[SEP]",
    "[speaker1]",
    "[speaker2]",
    "[goal]",
    "[uname]",
    "[movie1]",
    "[movie2]",
    "[star1]",
    "[star2]",
];

pub const SEP_TOKEN: &str = "[SEP]";
pub const GOAL_TOKEN: &str = "[goal]";
pub const UNAME_TOKEN: &str = "[uname]";
pub const SPEAKER1_TOKEN: &str = "[speaker1]";
pub const SPEAKER2_TOKEN: &str = "[speaker2]";

pub fn is_reserved(id: u32) -> bool {
    (id as usize) < RESERVED.len()
}

/// Splits `text` into tokenizer pieces. Every piece borrows from `text`
/// and the pieces concatenate back to `text`.
pub fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    'outer: while i < text.len() {
        if bytes[i] == b'[' {
            // Longest reserved token that matches here.
            let mut best: Option<usize> = None;
            for tok in RESERVED {
                if text[i..].starts_with(tok) && best.is_none_or(|b| tok.len() > b) {
                    best = Some(tok.len());
                }
            }
            if let Some(len) = best {
                out.push(&text[i..i + len]);
                i += len;
                continue 'outer;
            }
        }
        if bytes[i].is_ascii_alphanumeric() {
            let start = i;
            while i < text.len() && bytes[i].is_ascii_alphanumeric() {
                i += 1;
            }
            out.push(&text[start..i]);
            continue;
        }
        let ch = text[i..].chars().next().expect("index is on a char boundary");
        out.push(&text[i..i + ch.len_utf8()]);
        i += ch.len_utf8();
    }
    out
}

/// Bijection between token strings and ids, with the reserved block first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from raw texts. Non-reserved pieces are ordered by
    /// descending frequency, ties broken lexicographically, and pieces seen
    /// fewer than `min_count` times are left out.
    pub fn build<'a, I>(texts: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in texts {
            for piece in pieces(text) {
                *counts.entry(piece).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(p, c)| *c >= min_count.max(1) && !RESERVED.contains(p))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(p, _)| p.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix and unique pieces by construction")
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TextError> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED.iter()).any(|(t, r)| t != r)
        {
            return Err(TextError::Vocab("reserved tokens must occupy the lowest ids".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(TextError::Vocab(format!("duplicate token {tok:?}")));
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

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Appends any unseen pieces of `texts` after the existing ids.
    pub fn extend<'a, I>(&mut self, texts: I)
    where
        I: IntoIterator<Item = &'a str>,
    {
        for text in texts {
            for piece in pieces(text) {
                if !self.index.contains_key(piece) {
                    self.index.insert(piece.to_string(), self.tokens.len() as u32);
                    self.tokens.push(piece.to_string());
                }
            }
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pieces(text)
            .into_iter()
            .map(|p| self.id(p).unwrap_or(UNK))
            .collect()
    }

    /// Concatenates token strings; reserved tokens are rendered verbatim.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("[UNK]"))
            .collect()
    }

    /// Decodes, dropping every reserved token except the placeholder family
    /// (`[goal]`, `[uname]`, `[movie*]`, `[star*]`) that postprocessing
    /// consumes.
    pub fn decode_for_postprocess(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id >= GOAL || !is_reserved(id))
            .map(|&id| self.token(id).unwrap_or(""))
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = TextError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
