use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{AttributeSchema, GRAMMAR_WORDS, TEMPLATE_WORDS};
use crate::model::vocab::is_punctuation_token;

/// Coarse part-of-speech tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Adj,
    /// Past participle used attributively ("striped", "pleated").
    Participle,
    Det,
    Verb,
    Adp,
    Conj,
    Punct,
    /// Anything the tagger does not know.
    X,
}

impl PosTag {
    pub fn is_attribute(self) -> bool {
        matches!(self, PosTag::Noun | PosTag::Adj | PosTag::Participle)
    }

    /// Maps a tag string from an external tagger. Universal and Penn
    /// noun/adjective/participle tags are recognised; everything else is
    /// [`PosTag::X`].
    pub fn parse(tag: &str) -> PosTag {
        match tag.to_ascii_uppercase().as_str() {
            "NOUN" | "PROPN" | "NN" | "NNS" | "NNP" | "NNPS" => PosTag::Noun,
            "ADJ" | "JJ" | "JJR" | "JJS" => PosTag::Adj,
            "PARTICIPLE" | "VBN" => PosTag::Participle,
            "DET" | "DT" => PosTag::Det,
            "VERB" | "VB" | "VBZ" | "VBP" | "VBD" | "VBG" => PosTag::Verb,
            "ADP" | "IN" | "TO" => PosTag::Adp,
            "CONJ" | "CCONJ" | "CC" => PosTag::Conj,
            "PUNCT" | "." | "," => PosTag::Punct,
            _ => PosTag::X,
        }
    }
}

pub trait Tagger: Sync {
    fn tag(&self, tokens: &[String]) -> Vec<PosTag>;
}

/// Closed-lexicon tagger; unknown words get [`PosTag::X`] and so never
/// count as attributes.
#[derive(Debug, Clone, Default)]
pub struct LexiconTagger {
    lexicon: HashMap<String, PosTag>,
}

impl LexiconTagger {
    pub fn new(entries: impl IntoIterator<Item = (String, PosTag)>) -> Self {
        LexiconTagger {
            lexicon: entries.into_iter().collect(),
        }
    }

    /// Covers every word the synthetic grammar produces.
    pub fn for_schema(schema: &AttributeSchema) -> Self {
        let mut m = HashMap::new();
        for c in &schema.categories {
            m.insert(c.name.clone(), PosTag::Noun);
            for s in &c.subcategories {
                m.insert(s.clone(), PosTag::Noun);
            }
        }
        for v in schema.colors.iter().chain(&schema.sleeves).chain(&schema.lengths).chain(&schema.fits) {
            m.insert(v.clone(), PosTag::Adj);
        }
        for v in &schema.patterns {
            let tag = if v.ends_with("ed") { PosTag::Participle } else { PosTag::Adj };
            m.insert(v.clone(), tag);
        }
        for w in GRAMMAR_WORDS.iter().chain(&TEMPLATE_WORDS) {
            let tag = match *w {
                "a" | "this" => PosTag::Det,
                "is" | "has" | "be" | "modify" | "change" | "replace" => PosTag::Verb,
                "and" => PosTag::Conj,
                "with" | "in" | "of" | "to" | "instead" => PosTag::Adp,
                "length" | "fit" | "pattern" => PosTag::Noun,
                _ if is_punctuation_token(w) => PosTag::Punct,
                _ => PosTag::X,
            };
            m.entry(w.to_string()).or_insert(tag);
        }
        LexiconTagger { lexicon: m }
    }
}

impl Tagger for LexiconTagger {
    fn tag(&self, tokens: &[String]) -> Vec<PosTag> {
        tokens
            .iter()
            .map(|t| {
                if is_punctuation_token(t) {
                    PosTag::Punct
                } else {
                    self.lexicon.get(t).copied().unwrap_or(PosTag::X)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_values_are_attributes() {
        let s = AttributeSchema::default();
        let t = LexiconTagger::for_schema(&s);
        let toks: Vec<String> = s.attribute_tokens();
        assert!(t.tag(&toks).iter().all(|g| g.is_attribute()));
        let func: Vec<String> = ["a", "is", "and", "with", ".", "zebra"].map(String::from).to_vec();
        assert!(t.tag(&func).iter().all(|g| !g.is_attribute()));
    }

    #[test]
    fn external_tags_map() {
        assert_eq!(PosTag::parse("NN"), PosTag::Noun);
        assert_eq!(PosTag::parse("vbn"), PosTag::Participle);
        assert_eq!(PosTag::parse("RB"), PosTag::X);
    }
}
