use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const ALIGN: u32 = 4;
pub const RELCAP: u32 = 5;
pub const FUSE: u32 = 6;

pub const SPECIALS: [&str; 7] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]", "[ALIGN]", "[RELCAP]", "[FUSE]"];

/// Operating mode; selects the token prepended to every text input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Aligner / Captioner.
    Align,
    /// Relative Captioner.
    RelCap,
    /// Fuser.
    Fuse,
}

impl Mode {
    pub fn token(self) -> u32 {
        match self {
            Mode::Align => ALIGN,
            Mode::RelCap => RELCAP,
            Mode::Fuse => FUSE,
        }
    }
}

fn is_punct(c: char) -> bool {
    matches!(c, '.' | ',' | ';' | ':' | '!' | '?')
}

/// Lowercases and splits on whitespace, peeling sentence punctuation off
/// into separate tokens. Hyphenated words stay whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let word = raw.to_lowercase();
        let mut chars: Vec<char> = word.chars().collect();
        let mut trailing = Vec::new();
        while chars.last().is_some_and(|&c| is_punct(c)) {
            trailing.push(chars.pop().unwrap().to_string());
        }
        let mut start = 0;
        while start < chars.len() && is_punct(chars[start]) {
            out.push(chars[start].to_string());
            start += 1;
        }
        if start < chars.len() {
            out.push(chars[start..].iter().collect());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

pub fn is_punctuation_token(tok: &str) -> bool {
    !tok.is_empty() && tok.chars().all(is_punct)
}

/// Word-level vocabulary: the seven special tokens followed by words in
/// sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocabulary { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut body: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        body.sort();
        body.dedup();
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(body);
        Vocabulary::from(all)
    }

    /// Collects every token of every text.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Vocabulary::new(texts.into_iter().flat_map(tokenize))
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

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map_or("[UNK]", String::as_str)
    }

    /// `[BOS] tokens… [EOS]`, truncating the body so the result fits in
    /// `max_len` positions.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        let body_cap = max_len.saturating_sub(2);
        let mut ids = vec![BOS];
        ids.extend(tokenize(text).iter().take(body_cap).map(|t| self.id(t)));
        ids.push(EOS);
        ids
    }

    /// Joins the words of `ids`, skipping special tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i as usize >= SPECIALS.len())
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// True for tokens generation must never emit.
    pub fn is_forbidden_output(id: u32) -> bool {
        matches!(id, PAD | BOS | UNK | ALIGN | RELCAP | FUSE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(
            tokenize("A red, floral Dress. Long-sleeved!"),
            vec!["a", "red", ",", "floral", "dress", ".", "long-sleeved", "!"]
        );
    }

    #[test]
    fn vocabulary_layout_and_round_trip() {
        let v = Vocabulary::from_texts(["a red dress.", "a blue dress"]);
        assert_eq!(&v.words()[..7], &SPECIALS.map(String::from));
        let ids = v.encode("a red dress", 24);
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.decode(&ids), "a red dress");
        assert_eq!(v.id("purple"), UNK);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn encode_truncates_to_fit() {
        let v = Vocabulary::from_texts(["one two three four five"]);
        let ids = v.encode("one two three four five", 4);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[3], EOS);
    }
}
