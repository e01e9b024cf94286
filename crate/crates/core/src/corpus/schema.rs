use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{tokenize, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    pub subcategories: Vec<String>,
}

/// The attribute world of the synthetic catalogue.
///
/// Axes, in order: category, subcategory (nested under its category),
/// color, pattern, sleeve, length, fit. Every value is a distinct caption
/// token and owns a distinct rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    pub categories: Vec<CategorySpec>,
    /// At most eight; rendered as corners of the RGB cube.
    pub colors: Vec<String>,
    /// At most four textures.
    pub patterns: Vec<String>,
    pub sleeves: Vec<String>,
    pub lengths: Vec<String>,
    pub fits: Vec<String>,
}

/// Axis names in schema order.
pub const AXES: [&str; 7] = ["category", "subcategory", "color", "pattern", "sleeve", "length", "fit"];

/// Axes a feedback phrase may talk about.
pub const FEEDBACK_AXES: [&str; 5] = ["color", "pattern", "sleeve", "length", "fit"];

/// Words the pseudo-triplet templates add.
pub const TEMPLATE_WORDS: [&str; 8] = ["modify", "to", "be", "instead", "of", "change", "replace", "with"];

/// Palette for the color axis and for the value codes of the other axes.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
];

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for AttributeSchema {
    fn default() -> Self {
        let cat = |name: &str, subs: &[&str]| CategorySpec {
            name: name.into(),
            subcategories: strings(subs),
        };
        AttributeSchema {
            categories: vec![
                cat("dress", &["shift", "wrap", "slip"]),
                cat("shirt", &["oxford", "flannel", "linen"]),
                cat("top", &["tank", "blouse", "tunic"]),
                cat("pants", &["cargo", "jogger", "culotte"]),
                cat("skirt", &["pleated", "pencil", "tiered"]),
                cat("jacket", &["bomber", "blazer", "parka"]),
            ],
            colors: strings(&["black", "white", "red", "green", "blue", "yellow", "pink", "teal"]),
            patterns: strings(&["solid", "striped", "dotted", "checked"]),
            sleeves: strings(&["long-sleeved", "short-sleeved", "sleeveless"]),
            lengths: strings(&["cropped", "midi", "maxi"]),
            fits: strings(&["slim", "relaxed", "oversized"]),
        }
    }
}

/// One item's value on every axis.
pub type Attributes = BTreeMap<String, String>;

impl AttributeSchema {
    pub fn validate(&self) -> Result<(), String> {
        if self.categories.is_empty() || self.categories.iter().any(|c| c.subcategories.is_empty()) {
            return Err("every category needs at least one subcategory".into());
        }
        if self.colors.is_empty() || self.colors.len() > PALETTE.len() {
            return Err(format!("need 1..={} colors", PALETTE.len()));
        }
        if self.patterns.is_empty() || self.patterns.len() > 4 {
            return Err("need 1..=4 patterns".into());
        }
        for (axis, values) in [("sleeve", &self.sleeves), ("length", &self.lengths), ("fit", &self.fits)] {
            if values.is_empty() || values.len() > PALETTE.len() {
                return Err(format!("axis {axis} needs 1..={} values", PALETTE.len()));
            }
        }
        let max_subs = self.categories.iter().map(|c| c.subcategories.len()).max().unwrap();
        if self.categories.len() > PALETTE.len() || max_subs > PALETTE.len() {
            return Err(format!("at most {} categories and subcategories per category", PALETTE.len()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for token in self.attribute_tokens() {
            if tokenize(&token) != [token.clone()] {
                return Err(format!("value {token:?} is not a single lowercase token"));
            }
            if !seen.insert(token.clone()) {
                return Err(format!("value {token:?} appears on more than one axis"));
            }
        }
        Ok(())
    }

    /// Values of a flat axis; `None` for category and subcategory.
    pub fn axis_values(&self, axis: &str) -> Option<&[String]> {
        match axis {
            "color" => Some(&self.colors),
            "pattern" => Some(&self.patterns),
            "sleeve" => Some(&self.sleeves),
            "length" => Some(&self.lengths),
            "fit" => Some(&self.fits),
            _ => None,
        }
    }

    pub fn category(&self, name: &str) -> Option<(usize, &CategorySpec)> {
        self.categories.iter().enumerate().find(|(_, c)| c.name == name)
    }

    pub fn subcategories(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().flat_map(|c| c.subcategories.iter().map(String::as_str))
    }

    /// Index of the axis value, checking subcategory containment.
    pub fn value_index(&self, attrs: &Attributes, axis: &str) -> Result<usize, String> {
        let value = attrs.get(axis).ok_or_else(|| format!("missing attribute {axis}"))?;
        let position = match axis {
            "category" => self.category(value).map(|(i, _)| i),
            "subcategory" => {
                let (_, cat) = self
                    .category(attrs.get("category").ok_or("missing attribute category")?)
                    .ok_or("unknown category")?;
                cat.subcategories.iter().position(|s| s == value)
            }
            other => self
                .axis_values(other)
                .ok_or_else(|| format!("unknown axis {other}"))?
                .iter()
                .position(|v| v == value),
        };
        position.ok_or_else(|| format!("unknown {axis} value {value:?}"))
    }

    /// Checks that `attrs` assigns a known value to every axis and nothing else.
    pub fn check(&self, attrs: &Attributes) -> Result<(), String> {
        for axis in AXES {
            self.value_index(attrs, axis)?;
        }
        if let Some(extra) = attrs.keys().find(|k| !AXES.contains(&k.as_str())) {
            return Err(format!("unknown axis {extra}"));
        }
        Ok(())
    }

    /// Every attribute value on every axis.
    pub fn attribute_tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.categories {
            out.push(c.name.clone());
            out.extend(c.subcategories.iter().cloned());
        }
        for axis in FEEDBACK_AXES {
            out.extend(self.axis_values(axis).unwrap().iter().cloned());
        }
        out
    }

    /// Number of distinct attribute assignments.
    pub fn combinations(&self) -> usize {
        let subs: usize = self.categories.iter().map(|c| c.subcategories.len()).sum();
        FEEDBACK_AXES
            .iter()
            .map(|a| self.axis_values(a).unwrap().len())
            .product::<usize>()
            * subs
    }

    /// Every word any caption, feedback phrase or template can contain.
    pub fn lexicon(&self) -> Vec<String> {
        let mut words = self.attribute_tokens();
        words.extend(GRAMMAR_WORDS.iter().map(|s| s.to_string()));
        words.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        words.sort();
        words.dedup();
        words
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.lexicon())
    }
}

/// Function words of the caption and feedback grammars.
pub const GRAMMAR_WORDS: [&str; 12] = [
    "a", "this", "is", "has", "and", "with", "length", "fit", "pattern", "in", ".", ",",
];

/// Sentence-1 variants; each names color, pattern, subcategory and category once.
const FIRST_SENTENCE: [&str; 3] = [
    "a {color} {pattern} {subcategory} {category}.",
    "this {subcategory} {category} is {color} and {pattern}.",
    "a {pattern} {subcategory} {category} in {color}.",
];

/// Sentence-2 variants; each names sleeve, length and fit once.
const SECOND_SENTENCE: [&str; 2] = [
    "{sleeve} with a {length} length and {fit} fit.",
    "{fit} fit, {sleeve} with a {length} length.",
];

fn fill(template: &str, attrs: &Attributes) -> String {
    let mut s = template.to_string();
    for axis in AXES {
        if let Some(v) = attrs.get(axis) {
            s = s.replace(&format!("{{{axis}}}"), v);
        }
    }
    s
}

/// Two sentences; `variant` picks the grammar of each.
pub fn caption_from_variant(attrs: &Attributes, variant: u64) -> String {
    let first = FIRST_SENTENCE[(variant % FIRST_SENTENCE.len() as u64) as usize];
    let second = SECOND_SENTENCE[((variant / FIRST_SENTENCE.len() as u64) % SECOND_SENTENCE.len() as u64) as usize];
    format!("{} {}", fill(first, attrs), fill(second, attrs))
}

/// The phrase describing how an item looks on one feedback axis.
pub fn feedback_phrase(axis: &str, value: &str) -> String {
    match axis {
        "pattern" => format!("has a {value} pattern"),
        "length" => format!("has a {value} length"),
        "fit" => format!("has a {value} fit"),
        _ => format!("is {value}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_is_valid() {
        let s = AttributeSchema::default();
        s.validate().unwrap();
        assert_eq!(s.combinations(), 18 * 8 * 4 * 27);
    }

    #[test]
    fn duplicate_tokens_rejected() {
        let mut s = AttributeSchema::default();
        s.fits[0] = "red".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn every_caption_word_is_in_the_lexicon() {
        let s = AttributeSchema::default();
        let lex: std::collections::BTreeSet<_> = s.lexicon().into_iter().collect();
        let mut attrs = Attributes::new();
        for (axis, v) in AXES.iter().zip(["jacket", "parka", "teal", "checked", "sleeveless", "maxi", "oversized"]) {
            attrs.insert(axis.to_string(), v.to_string());
        }
        for variant in 0..6 {
            for tok in tokenize(&caption_from_variant(&attrs, variant)) {
                assert!(lex.contains(&tok), "{tok}");
            }
        }
        for axis in FEEDBACK_AXES {
            for tok in tokenize(&feedback_phrase(axis, &attrs[axis])) {
                assert!(lex.contains(&tok), "{tok}");
            }
        }
    }
}
