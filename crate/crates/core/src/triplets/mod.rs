//! Weakly-supervised pseudo-triplets from image-text pairs.
//!
//! For every reference item a target is chosen among a random sample of
//! the corpus by minimising
//!
//! `Δ = −λ1·cos(φ_I(I), φ_I(I′)) − λ2·cos(φ_T(T), φ_T(T′)) + λ3·d(T, T′)`
//!
//! where `d` counts attribute tokens present in one caption but not the
//! other. The relative caption is a template filled with the attribute
//! tokens that the two captions' current sentences do not share.
//!
//! ```
//! use fadvlp::triplets::{delta, hamming_distance, DeltaWeights};
//!
//! let a = ["red", "dress", "floral"].map(String::from);
//! let b = ["blue", "dress"].map(String::from);
//! assert_eq!(hamming_distance(&a, &b), 3);
//! let w = DeltaWeights::default();
//! assert!((delta(0.8, 0.5, 4, &w) + 1.05).abs() < 1e-12);
//! ```

mod tagger;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use tagger::{LexiconTagger, PosTag, Tagger};

use crate::corpus::{AttributeSchema, CorpusRecord, AXES};
use crate::model::tokenize;
use crate::model::vocab::is_punctuation_token;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaWeights {
    pub image: f64,
    pub text: f64,
    pub tokens: f64,
}

impl Default for DeltaWeights {
    fn default() -> Self {
        DeltaWeights {
            image: 1.0,
            text: 1.0,
            tokens: 1.0 / 16.0,
        }
    }
}

/// `−λ1·cos_img − λ2·cos_txt + λ3·d`.
pub fn delta(cos_image: f64, cos_text: f64, distance: usize, w: &DeltaWeights) -> f64 {
    -w.image * cos_image - w.text * cos_text + w.tokens * distance as f64
}

/// Size of the symmetric difference of the two token sets.
pub fn hamming_distance<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let sa: BTreeSet<&str> = a.iter().map(AsRef::as_ref).collect();
    let sb: BTreeSet<&str> = b.iter().map(AsRef::as_ref).collect();
    sa.symmetric_difference(&sb).count()
}

/// Drops tokens present in both lists, keeping order.
pub fn remove_overlap(reference: &[String], target: &[String]) -> (Vec<String>, Vec<String>) {
    let keep = |xs: &[String], other: &[String]| xs.iter().filter(|x| !other.contains(x)).cloned().collect();
    (keep(reference, target), keep(target, reference))
}

/// The four relative-caption templates, `<r>` and `<t>` marking the
/// reference and target slots.
pub const TEMPLATES: [&str; 4] = ["modify <r> to be <t>", "<t> instead of <r>", "change <r> to <t>", "replace <r> with <t>"];

/// Fills template `template_id` with space-joined tokens; an empty slot
/// becomes an empty string and doubled spaces collapse.
pub fn render_template(template_id: usize, reference: &[String], target: &[String]) -> String {
    let filled = TEMPLATES[template_id]
        .replace("<r>", &reference.join(" "))
        .replace("<t>", &target.join(" "));
    let mut out = String::with_capacity(filled.len());
    for c in filled.chars() {
        if !(c == ' ' && out.ends_with(' ')) {
            out.push(c);
        }
    }
    out
}

/// Picks a template uniformly and fills it. Returns `(template_id, text)`.
pub fn fill_template(reference: &[String], target: &[String], rng: &mut impl Rng) -> Result<(usize, String), String> {
    if reference.is_empty() && target.is_empty() {
        return Err("both template slots are empty".into());
    }
    let id = rng.gen_range(0..TEMPLATES.len());
    Ok((id, render_template(id, reference, target)))
}

/// Token frequencies over every caption of the corpus, and the count a
/// token needs to be an attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeVocabulary {
    pub counts: BTreeMap<String, usize>,
    pub threshold: usize,
}

impl AttributeVocabulary {
    pub fn from_entries(entries: &[CatalogEntry], threshold: usize) -> Self {
        let mut counts = BTreeMap::new();
        for e in entries {
            for sentence in &e.sentences {
                for (tok, _) in sentence {
                    *counts.entry(tok.clone()).or_insert(0) += 1;
                }
            }
        }
        AttributeVocabulary { counts, threshold }
    }

    pub fn is_frequent(&self, token: &str) -> bool {
        self.counts.get(token).copied().unwrap_or(0) >= self.threshold
    }
}

/// Frequency threshold scaled from 500 occurrences in 1.4M pairs:
/// `max(2, round(500 · n / 1.4e6))`.
pub fn scaled_threshold(corpus_size: usize) -> usize {
    ((500.0 * corpus_size as f64 / 1.4e6).round() as usize).max(2)
}

/// Keeps noun, adjective and participle tokens that are frequent enough,
/// lowercased, first occurrence only.
pub fn filter_attribute_tokens(sentence: &[(String, PosTag)], vocab: &AttributeVocabulary) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (tok, tag) in sentence {
        let tok = tok.to_lowercase();
        if tag.is_attribute() && vocab.is_frequent(&tok) && !out.contains(&tok) {
            out.push(tok);
        }
    }
    out
}

/// Unit-norm feature vectors for `Δ`.
pub trait FeatureProvider: Sync {
    fn image_features(&self, record: &CorpusRecord) -> Result<Vec<f64>, String>;
    fn text_features(&self, record: &CorpusRecord) -> Result<Vec<f64>, String>;
}

fn unit(mut v: Vec<f64>, what: &str, id: u64) -> Result<Vec<f64>, String> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(format!("item {id}: {what} features have zero norm"));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Features the generator knows exactly: a one-hot of every attribute
/// value for images, a bag of lexicon words (punctuation aside) for
/// captions.
#[derive(Debug, Clone)]
pub struct SyntheticFeatures {
    attribute_index: HashMap<(String, String), usize>,
    word_index: HashMap<String, usize>,
}

impl SyntheticFeatures {
    pub fn new(schema: &AttributeSchema) -> Self {
        let mut attribute_index = HashMap::new();
        for c in &schema.categories {
            let n = attribute_index.len();
            attribute_index.insert(("category".to_string(), c.name.clone()), n);
            for s in &c.subcategories {
                let n = attribute_index.len();
                attribute_index.insert(("subcategory".to_string(), s.clone()), n);
            }
        }
        for axis in &AXES[2..] {
            for v in schema.axis_values(axis).unwrap() {
                let n = attribute_index.len();
                attribute_index.insert((axis.to_string(), v.clone()), n);
            }
        }
        let word_index = schema.lexicon().into_iter().enumerate().map(|(i, w)| (w, i)).collect();
        SyntheticFeatures {
            attribute_index,
            word_index,
        }
    }
}

impl FeatureProvider for SyntheticFeatures {
    fn image_features(&self, r: &CorpusRecord) -> Result<Vec<f64>, String> {
        let mut v = vec![0.0; self.attribute_index.len()];
        for (axis, value) in &r.attributes {
            let i = self
                .attribute_index
                .get(&(axis.clone(), value.clone()))
                .ok_or_else(|| format!("item {}: unknown {axis} value {value:?}", r.id))?;
            v[*i] = 1.0;
        }
        unit(v, "image", r.id)
    }

    fn text_features(&self, r: &CorpusRecord) -> Result<Vec<f64>, String> {
        let mut v = vec![0.0; self.word_index.len()];
        for tok in tokenize(&r.caption).iter().filter(|t| !is_punctuation_token(t)) {
            if let Some(&i) = self.word_index.get(tok) {
                v[i] += 1.0;
            }
        }
        unit(v, "text", r.id)
    }
}

/// Reads `image_features` / `text_features` stored on each record.
#[derive(Debug, Clone, Copy, Default)]
pub struct StoredFeatures;

impl FeatureProvider for StoredFeatures {
    fn image_features(&self, r: &CorpusRecord) -> Result<Vec<f64>, String> {
        let v = r.image_features.as_ref().ok_or_else(|| format!("item {}: no image_features", r.id))?;
        unit(v.iter().map(|&x| x as f64).collect(), "image", r.id)
    }

    fn text_features(&self, r: &CorpusRecord) -> Result<Vec<f64>, String> {
        let v = r.text_features.as_ref().ok_or_else(|| format!("item {}: no text_features", r.id))?;
        unit(v.iter().map(|&x| x as f64).collect(), "text", r.id)
    }
}

/// A corpus item prepared for triplet construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub id: u64,
    pub caption: String,
    /// Tagged tokens, one list per sentence.
    pub sentences: Vec<Vec<(String, PosTag)>>,
    pub image_features: Vec<f64>,
    pub text_features: Vec<f64>,
    pub category: String,
    pub subcategory: String,
}

/// Splits tokens into sentences at `.`, `!` and `?`.
pub fn split_sentences(tokens: Vec<String>) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for t in tokens {
        let end = matches!(t.as_str(), "." | "!" | "?");
        cur.push(t);
        if end {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl CatalogEntry {
    pub fn from_record(r: &CorpusRecord, features: &dyn FeatureProvider, tagger: &dyn Tagger) -> Result<Self, String> {
        let sentences: Vec<Vec<(String, PosTag)>> = match &r.tagged {
            Some(tagged) => tagged
                .iter()
                .map(|s| s.iter().map(|(t, g)| (t.to_lowercase(), PosTag::parse(g))).collect())
                .collect(),
            None => split_sentences(tokenize(&r.caption))
                .into_iter()
                .map(|s| {
                    let tags = tagger.tag(&s);
                    s.into_iter().zip(tags).collect()
                })
                .collect(),
        };
        if sentences.is_empty() {
            return Err(format!("item {}: caption has no sentences", r.id));
        }
        Ok(CatalogEntry {
            id: r.id,
            caption: r.caption.clone(),
            sentences,
            image_features: features.image_features(r)?,
            text_features: features.text_features(r)?,
            category: r.category.clone(),
            subcategory: r.subcategory.clone(),
        })
    }

    /// Tagged tokens of sentence `index`, or `None` once sentences run out.
    pub fn sentence(&self, index: usize) -> Option<&[(String, PosTag)]> {
        self.sentences.get(index).map(Vec::as_slice)
    }
}

/// Tagged tokens of sentence `index`; `None` signals that the caption's
/// sentences are exhausted.
pub fn first_sentence(entry: &CatalogEntry, index: usize) -> Option<&[(String, PosTag)]> {
    entry.sentence(index)
}

/// When to move on to the next sentence pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackRule {
    /// Retry when either slot is empty.
    #[default]
    EitherEmpty,
    /// Retry only when both slots are empty.
    BothEmpty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub sample_size: usize,
    pub weights: DeltaWeights,
    /// `None` scales the threshold with corpus size.
    pub frequency_threshold: Option<usize>,
    pub fallback: FallbackRule,
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            sample_size: 1000,
            weights: DeltaWeights::default(),
            frequency_threshold: None,
            fallback: FallbackRule::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoTriplet {
    pub ref_id: u64,
    pub tgt_id: u64,
    pub relative_caption: String,
    pub template_id: usize,
    pub sentence_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Built(PseudoTriplet),
    /// No candidate differs from the reference.
    NoCandidate,
    /// Every sentence pair left an empty slot.
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TripletStats {
    pub references: usize,
    pub built: usize,
    pub skipped: usize,
    pub fallback_used: usize,
}

/// Per-entry token data computed once per corpus.
pub struct Prepared<'a> {
    pub entries: &'a [CatalogEntry],
    pub vocab: AttributeVocabulary,
    /// Filtered tokens of sentence 0, sorted and deduplicated.
    first: Vec<Vec<String>>,
    /// Filtered tokens of all sentences, sorted and deduplicated.
    all: Vec<Vec<String>>,
    position: HashMap<u64, usize>,
}

fn sorted_set(tokens: impl IntoIterator<Item = String>) -> Vec<String> {
    let set: BTreeSet<String> = tokens.into_iter().collect();
    set.into_iter().collect()
}

fn sym_diff_sorted(a: &[String], b: &[String]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                n += 1;
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                n += 1;
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    n + (a.len() - i) + (b.len() - j)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<'a> Prepared<'a> {
    pub fn new(entries: &'a [CatalogEntry], threshold: usize) -> Result<Self, String> {
        let vocab = AttributeVocabulary::from_entries(entries, threshold);
        let first = entries
            .iter()
            .map(|e| sorted_set(filter_attribute_tokens(&e.sentences[0], &vocab)))
            .collect();
        let all = entries
            .iter()
            .map(|e| sorted_set(e.sentences.iter().flat_map(|s| filter_attribute_tokens(s, &vocab))))
            .collect();
        let mut position = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if position.insert(e.id, i).is_some() {
                return Err(format!("duplicate id {}", e.id));
            }
        }
        Ok(Prepared {
            entries,
            vocab,
            first,
            all,
            position,
        })
    }

    /// `Δ` between entries at positions `a` and `b`, using first-sentence tokens.
    pub fn delta_at(&self, a: usize, b: usize, w: &DeltaWeights) -> f64 {
        let (ea, eb) = (&self.entries[a], &self.entries[b]);
        delta(
            dot(&ea.image_features, &eb.image_features),
            dot(&ea.text_features, &eb.text_features),
            sym_diff_sorted(&self.first[a], &self.first[b]),
            w,
        )
    }

    /// Entries other than `a` whose attribute tokens (over all sentences)
    /// differ from `a`'s.
    pub fn eligible(&self, a: usize) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&j| j != a && sym_diff_sorted(&self.all[a], &self.all[j]) > 0)
            .collect()
    }

    /// Samples up to `sample_size` eligible entries without replacement and
    /// returns the position minimising `Δ`; ties go to the smaller id.
    pub fn select_target(&self, a: usize, sample_size: usize, w: &DeltaWeights, rng: &mut impl Rng) -> Option<usize> {
        let eligible = self.eligible(a);
        if eligible.is_empty() || sample_size == 0 {
            return None;
        }
        let sample: Vec<usize> = if sample_size >= eligible.len() {
            eligible
        } else {
            index::sample(rng, eligible.len(), sample_size).into_iter().map(|k| eligible[k]).collect()
        };
        sample.into_iter().min_by(|&x, &y| {
            self.delta_at(a, x, w)
                .total_cmp(&self.delta_at(a, y, w))
                .then(self.entries[x].id.cmp(&self.entries[y].id))
        })
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.position.get(&id).copied()
    }

    /// Relative caption from sentence `k` onwards until both (or either,
    /// per `rule`) slots are non-empty.
    pub fn relative_caption(
        &self,
        a: usize,
        b: usize,
        rule: FallbackRule,
        rng: &mut impl Rng,
    ) -> Option<(usize, usize, String)> {
        let (ea, eb) = (&self.entries[a], &self.entries[b]);
        for k in 0.. {
            let (sa, sb) = (first_sentence(ea, k)?, first_sentence(eb, k)?);
            let (r, t) = remove_overlap(
                &filter_attribute_tokens(sa, &self.vocab),
                &filter_attribute_tokens(sb, &self.vocab),
            );
            let retry = match rule {
                FallbackRule::EitherEmpty => r.is_empty() || t.is_empty(),
                FallbackRule::BothEmpty => r.is_empty() && t.is_empty(),
            };
            if !retry {
                let (id, text) = fill_template(&r, &t, rng).expect("a slot is non-empty");
                return Some((k, id, text));
            }
        }
        None
    }

    /// The full procedure for the reference at position `a`.
    pub fn build_triplet(&self, a: usize, cfg: &TripletConfig, rng: &mut impl Rng) -> Outcome {
        let Some(b) = self.select_target(a, cfg.sample_size, &cfg.weights, rng) else {
            return Outcome::NoCandidate;
        };
        match self.relative_caption(a, b, cfg.fallback, rng) {
            Some((k, template_id, relative_caption)) => Outcome::Built(PseudoTriplet {
                ref_id: self.entries[a].id,
                tgt_id: self.entries[b].id,
                relative_caption,
                template_id,
                sentence_index: k,
            }),
            None => Outcome::Exhausted,
        }
    }
}

/// One attempt per reference, in corpus order, each with its own rng
/// seeded by `seed ^ id`.
pub fn build_triplet_dataset(
    entries: &[CatalogEntry],
    cfg: &TripletConfig,
) -> Result<(Vec<PseudoTriplet>, TripletStats), String> {
    if entries.len() < 2 {
        return Err("need at least two entries".into());
    }
    let threshold = cfg.frequency_threshold.unwrap_or_else(|| scaled_threshold(entries.len()));
    let prepared = Prepared::new(entries, threshold)?;
    let outcomes: Vec<Outcome> = (0..entries.len())
        .into_par_iter()
        .map(|a| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ entries[a].id);
            prepared.build_triplet(a, cfg, &mut rng)
        })
        .collect();
    let mut stats = TripletStats {
        references: entries.len(),
        ..TripletStats::default()
    };
    let mut triplets = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Built(t) => {
                stats.built += 1;
                if t.sentence_index > 0 {
                    stats.fallback_used += 1;
                }
                triplets.push(t);
            }
            _ => stats.skipped += 1,
        }
    }
    Ok((triplets, stats))
}

/// Catalog entries for a whole corpus.
pub fn prepare_entries(
    records: &[CorpusRecord],
    features: &dyn FeatureProvider,
    tagger: &dyn Tagger,
) -> Result<Vec<CatalogEntry>, String> {
    records.iter().map(|r| CatalogEntry::from_record(r, features, tagger)).collect()
}
