//! Deterministic synthetic fashion catalogue and its JSON-lines format.
//!
//! Each item draws one value per axis, renders a 32×32 image in which
//! every axis paints its own region, and gets a two-sentence caption: the
//! first sentence names color, pattern, subcategory and category, the
//! second names sleeve, length and fit.
//!
//! ```
//! use fadvlp::corpus::{generate_corpus, AttributeSchema};
//!
//! let schema = AttributeSchema::default();
//! let items = generate_corpus(&schema, 3, 7).unwrap();
//! assert_eq!(items.len(), 3);
//! assert!(items[0].caption.contains(&items[0].attributes["color"]));
//! ```

mod feedback;
mod io;
mod render;
mod schema;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use feedback::{feedback_triplets, FeedbackTriplet};
pub use io::{read_corpus, read_jsonl, write_corpus, write_jsonl, DataError};
pub use render::{render_caption, render_image, CHANNELS, IMAGE_SIDE, REGIONS};
pub use schema::{
    caption_from_variant, feedback_phrase, AttributeSchema, Attributes, CategorySpec, AXES, FEEDBACK_AXES,
    GRAMMAR_WORDS, PALETTE, TEMPLATE_WORDS,
};

use crate::tensor::Tensor;

/// Noise amplitude of rendered images.
pub const NOISE: f32 = 0.05;

/// One catalogue item as stored on disk.
///
/// Synthetic items carry `attributes` and `seed`, from which the image is
/// rendered. Converted real catalogues may instead carry precomputed
/// `image_features` / `text_features` and pre-tagged sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: Attributes,
    #[serde(default)]
    pub seed: u64,
    pub caption: String,
    pub category: String,
    pub subcategory: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_features: Option<Vec<f32>>,
    /// Per sentence, `(token, tag)` pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tagged: Option<Vec<Vec<(String, String)>>>,
}

impl CorpusRecord {
    pub fn image(&self, schema: &AttributeSchema) -> Result<Tensor<f32>, String> {
        render_image(schema, &self.attributes, self.seed, NOISE).map_err(|e| format!("item {}: {e}", self.id))
    }
}

/// Draws `n` items, ids `0..n`, every axis uniform.
pub fn generate_corpus(schema: &AttributeSchema, n: usize, master_seed: u64) -> Result<Vec<CorpusRecord>, String> {
    schema.validate()?;
    if n == 0 {
        return Err("corpus size must be at least 1".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut out = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let category = schema.categories.choose(&mut rng).unwrap();
        let subcategory = category.subcategories.choose(&mut rng).unwrap();
        let mut attributes = Attributes::new();
        attributes.insert("category".into(), category.name.clone());
        attributes.insert("subcategory".into(), subcategory.clone());
        for axis in FEEDBACK_AXES {
            let v = schema.axis_values(axis).unwrap().choose(&mut rng).unwrap();
            attributes.insert(axis.into(), v.clone());
        }
        let seed: u64 = rng.gen();
        out.push(CorpusRecord {
            id,
            caption: render_caption(&attributes, seed),
            category: category.name.clone(),
            subcategory: subcategory.clone(),
            attributes,
            seed,
            image_features: None,
            text_features: None,
            tagged: None,
        });
    }
    Ok(out)
}

/// Holds out `round(n · fraction)` items chosen by a seeded shuffle. Both
/// parts keep corpus order.
pub fn split_holdout(
    items: &[CorpusRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<CorpusRecord>, Vec<CorpusRecord>), String> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(format!("holdout fraction {fraction} outside (0, 1)"));
    }
    let k = (items.len() as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = vec![false; items.len()];
    for &i in &order[..k] {
        held[i] = true;
    }
    let (hold, train): (Vec<_>, Vec<_>) = items.iter().cloned().zip(held).partition(|(_, h)| *h);
    Ok((
        train.into_iter().map(|(r, _)| r).collect(),
        hold.into_iter().map(|(r, _)| r).collect(),
    ))
}
