use std::collections::{BTreeMap, BTreeSet};

use fadvlp::corpus::{CorpusRecord, AXES};

/// Exhaustive argmin written straight from the attribute assignments:
/// the first sentence names category, subcategory, color and pattern, the
/// image one-hot covers all seven axes, and the bag of words counts every
/// caption word.
pub fn brute_force_target(records: &[CorpusRecord], a: usize) -> Option<u64> {
    let first = |r: &CorpusRecord| -> BTreeSet<String> {
        ["category", "subcategory", "color", "pattern"].iter().map(|k| r.attributes[*k].clone()).collect()
    };
    let all = |r: &CorpusRecord| -> BTreeSet<String> { r.attributes.values().cloned().collect() };
    let bow = |r: &CorpusRecord| -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for w in r.caption.replace(['.', ','], " ").split_whitespace() {
            *m.entry(w.to_string()).or_insert(0.0) += 1.0;
        }
        m
    };
    let cos_text = |x: &CorpusRecord, y: &CorpusRecord| {
        let (bx, by) = (bow(x), bow(y));
        let d: f64 = bx.iter().map(|(k, v)| v * by.get(k).unwrap_or(&0.0)).sum();
        let n = |b: &BTreeMap<String, f64>| b.values().map(|v| v * v).sum::<f64>().sqrt();
        d / (n(&bx) * n(&by))
    };
    let r = &records[a];
    let mut best: Option<(f64, u64)> = None;
    for c in records {
        if c.id == r.id || all(c) == all(r) {
            continue;
        }
        let shared = AXES.iter().filter(|k| c.attributes[**k] == r.attributes[**k]).count() as f64;
        let d = first(r).symmetric_difference(&first(c)).count() as f64;
        let score = -shared / 7.0 - cos_text(r, c) + d / 16.0;
        let better = match best {
            None => true,
            Some((s, id)) => score < s - 1e-12 || ((score - s).abs() <= 1e-12 && c.id < id),
        };
        if better {
            best = Some((score, c.id));
        }
    }
    best.map(|(_, id)| id)
}
