use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{rank_of, recall_from_ranks};

/// Unit-norm embeddings of every gallery item: `f(i)` on the image side
/// and `g(t)` on the caption side.
#[derive(Debug, Clone, Default)]
pub struct RetrievalGallery {
    pub ids: Vec<u64>,
    pub categories: Vec<String>,
    pub subcategories: Vec<String>,
    pub images: Vec<Vec<f32>>,
    pub texts: Vec<Vec<f32>>,
}

impl RetrievalGallery {
    pub fn position_map(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.ids.len();
        if [self.categories.len(), self.subcategories.len(), self.images.len(), self.texts.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err("gallery columns differ in length".into());
        }
        if self.position_map().len() != n {
            return Err("gallery ids are not unique".into());
        }
        Ok(())
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Image query, caption candidates.
    I2t,
    /// Caption query, image candidates.
    T2i,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolParams {
    pub candidates: usize,
    pub repeats: usize,
    pub seed: u64,
    pub ks: Vec<usize>,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            candidates: 101,
            repeats: 5,
            seed: 0,
            ks: vec![1, 5, 10],
        }
    }
}

/// `candidates − 1` negatives for the item at `q`: same subcategory first,
/// then same category, then anything else, each tier sampled without
/// replacement once the earlier tiers run short.
pub fn sample_negatives(
    gallery: &RetrievalGallery,
    q: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, String> {
    let mut tiers: [Vec<usize>; 3] = Default::default();
    for j in 0..gallery.ids.len() {
        if j == q {
            continue;
        }
        let tier = if gallery.subcategories[j] == gallery.subcategories[q] {
            0
        } else if gallery.categories[j] == gallery.categories[q] {
            1
        } else {
            2
        };
        tiers[tier].push(j);
    }
    let mut out = Vec::with_capacity(count);
    for tier in tiers {
        let need = count - out.len();
        if need == 0 {
            break;
        }
        if tier.len() <= need {
            out.extend(tier);
        } else {
            out.extend(index::sample(rng, tier.len(), need).into_iter().map(|k| tier[k]));
        }
    }
    if out.len() < count {
        return Err(format!("gallery of {} items cannot supply {count} negatives", gallery.ids.len()));
    }
    Ok(out)
}

/// Recall@K for each K and the number of (query, repeat) draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolResult {
    pub recall: BTreeMap<usize, f64>,
    pub draws: usize,
}

/// Ranks each query's true match against `candidates − 1` sampled
/// negatives, `repeats` times with fresh negatives, and pools the ranks.
pub fn crossmodal_protocol(
    gallery: &RetrievalGallery,
    queries: &[u64],
    direction: Direction,
    params: &ProtocolParams,
) -> Result<ProtocolResult, String> {
    gallery.validate()?;
    if params.candidates < 2 || params.repeats == 0 {
        return Err("need at least two candidates and one repeat".into());
    }
    if let Some(&k) = params.ks.iter().find(|&&k| k == 0 || k > params.candidates) {
        return Err(format!("K = {k} outside 1..={}", params.candidates));
    }
    let pos = gallery.position_map();
    let qs: Vec<usize> = queries
        .iter()
        .map(|id| pos.get(id).copied().ok_or_else(|| format!("query {id} not in the gallery")))
        .collect::<Result<_, _>>()?;
    let (query_side, cand_side) = match direction {
        Direction::I2t => (&gallery.images, &gallery.texts),
        Direction::T2i => (&gallery.texts, &gallery.images),
    };
    let jobs: Vec<(usize, usize)> = (0..params.repeats).flat_map(|r| qs.iter().map(move |&q| (r, q))).collect();
    let ranks: Vec<usize> = jobs
        .par_iter()
        .map(|&(r, q)| {
            let stream = (r as u64) << 40 ^ gallery.ids[q];
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let negs = sample_negatives(gallery, q, params.candidates - 1, &mut rng)?;
            let mut scores = Vec::with_capacity(params.candidates);
            scores.push(dot(&query_side[q], &cand_side[q]));
            scores.extend(negs.iter().map(|&j| dot(&query_side[q], &cand_side[j])));
            Ok(rank_of(&scores, 0))
        })
        .collect::<Result<_, String>>()?;
    Ok(ProtocolResult {
        recall: params.ks.iter().map(|&k| (k, recall_from_ranks(&ranks, k))).collect(),
        draws: ranks.len(),
    })
}

/// Rank of each target among the same-category gallery items other than
/// the reference, scored by `dot(query, image embedding)`.
pub fn feedback_ranks(
    gallery: &RetrievalGallery,
    queries: &[Vec<f32>],
    references: &[u64],
    targets: &[u64],
) -> Result<Vec<usize>, String> {
    let pos = gallery.position_map();
    let find = |id: &u64| pos.get(id).copied().ok_or_else(|| format!("item {id} not in the gallery"));
    queries
        .iter()
        .zip(references.iter().zip(targets))
        .map(|(q, (r, t))| {
            let (ri, ti) = (find(r)?, find(t)?);
            let cat = &gallery.categories[ri];
            if &gallery.categories[ti] != cat {
                return Err(format!("target {t} outside the reference category"));
            }
            let gold = dot(q, &gallery.images[ti]);
            let better = (0..gallery.ids.len())
                .filter(|&j| j != ri && j != ti && &gallery.categories[j] == cat)
                .filter(|&j| dot(q, &gallery.images[j]) > gold)
                .count();
            Ok(better + 1)
        })
        .collect()
}
