use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schema::{feedback_phrase, FEEDBACK_AXES};
use super::CorpusRecord;

/// A reference, a target and two feedback phrases that together pin the
/// target down among the reference's category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackTriplet {
    pub ref_id: u64,
    pub tgt_id: u64,
    pub category: String,
    pub feedback: [String; 2],
}

impl FeedbackTriplet {
    /// Both phrases joined with " and ".
    pub fn joined(&self) -> String {
        format!("{} and {}", self.feedback[0], self.feedback[1])
    }
}

fn signature(r: &CorpusRecord) -> Vec<&str> {
    r.attributes.values().map(String::as_str).collect()
}

/// For each reference, up to `per_reference` targets from `pool` with the
/// same category and subcategory that differ in exactly two feedback
/// axes and whose attribute assignment occurs once in `pool`. Phrases
/// follow axis order. Targets are drawn with `ChaCha8Rng(seed ^ ref_id)`
/// and listed by id.
pub fn feedback_triplets(
    pool: &[CorpusRecord],
    references: &[CorpusRecord],
    per_reference: usize,
    seed: u64,
) -> Vec<FeedbackTriplet> {
    let mut counts: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
    for r in pool {
        *counts.entry(signature(r)).or_insert(0) += 1;
    }
    let mut out = Vec::new();
    for r in references {
        let candidates: Vec<(&CorpusRecord, Vec<&str>)> = pool
            .iter()
            .filter(|c| c.id != r.id && c.category == r.category && c.subcategory == r.subcategory)
            .filter(|c| counts[&signature(c)] == 1)
            .filter_map(|c| {
                let diff: Vec<&str> = FEEDBACK_AXES
                    .iter()
                    .copied()
                    .filter(|a| c.attributes.get(*a) != r.attributes.get(*a))
                    .collect();
                (diff.len() == 2).then_some((c, diff))
            })
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ r.id);
        let k = per_reference.min(candidates.len());
        let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), k).into_vec();
        picked.sort_unstable();
        for i in picked {
            let (c, diff) = &candidates[i];
            out.push(FeedbackTriplet {
                ref_id: r.id,
                tgt_id: c.id,
                category: r.category.clone(),
                feedback: [0, 1].map(|j| feedback_phrase(diff[j], &c.attributes[diff[j]])),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, AttributeSchema};

    #[test]
    fn targets_differ_in_two_axes() {
        let items = generate_corpus(&AttributeSchema::default(), 600, 2).unwrap();
        let ts = feedback_triplets(&items, &items[..50], 2, 9);
        assert!(ts.len() >= 50, "{}", ts.len());
        let by_id: BTreeMap<u64, &CorpusRecord> = items.iter().map(|r| (r.id, r)).collect();
        for t in &ts {
            let (r, c) = (by_id[&t.ref_id], by_id[&t.tgt_id]);
            assert_eq!(r.subcategory, c.subcategory);
            let differing = FEEDBACK_AXES.iter().filter(|a| r.attributes[**a] != c.attributes[**a]).count();
            assert_eq!(differing, 2);
            for phrase in &t.feedback {
                assert!(FEEDBACK_AXES.iter().any(|a| phrase.ends_with(&c.attributes[*a])
                    || phrase.contains(&format!(" {} ", c.attributes[*a]))));
            }
        }
        assert_eq!(ts, feedback_triplets(&items, &items[..50], 2, 9));
    }

    #[test]
    fn joined_uses_and() {
        let t = FeedbackTriplet {
            ref_id: 0,
            tgt_id: 1,
            category: "dress".into(),
            feedback: ["is red".into(), "has long sleeves".into()],
        };
        assert_eq!(t.joined(), "is red and has long sleeves");
    }
}
