//! Second implementations of the caption and classification metrics,
//! written from the formulas with different data structures.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn grams(tokens: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        *out.entry(tokens[i..i + n].join(" ")).or_insert(0.0) += 1.0;
        i += 1;
    }
    out
}

pub fn bleu4(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let mut clipped = vec![0.0; 5];
    let mut counts = vec![0.0; 5];
    let mut c = 0.0;
    let mut r = 0.0;
    for k in 0..hyps.len() {
        let h = &hyps[k];
        c += h.len() as f64;
        let mut best: Option<usize> = None;
        for rf in &refs[k] {
            best = Some(match best {
                None => rf.len(),
                Some(b) => {
                    let (db, dr) = ((b as i64 - h.len() as i64).abs(), (rf.len() as i64 - h.len() as i64).abs());
                    if dr < db || (dr == db && rf.len() < b) {
                        rf.len()
                    } else {
                        b
                    }
                }
            });
        }
        r += best.unwrap_or(0) as f64;
        for n in 1..=4 {
            for (g, cnt) in grams(h, n) {
                let cap = refs[k].iter().map(|rf| grams(rf, n).get(&g).copied().unwrap_or(0.0)).fold(0.0, f64::max);
                clipped[n] += cnt.min(cap);
                counts[n] += cnt;
            }
        }
    }
    let mut geo = 1.0;
    for n in 1..=4 {
        if clipped[n] == 0.0 {
            return 0.0;
        }
        geo *= (clipped[n] / counts[n]).powf(0.25);
    }
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * geo
}

fn lcs_table(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] { 1 + t[i + 1][j + 1] } else { t[i + 1][j].max(t[i][j + 1]) };
        }
    }
    t[0][0]
}

pub fn rouge_l(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let beta = 1.2f64;
    let mut total = 0.0;
    for (h, rs) in hyps.iter().zip(refs) {
        let precs: Vec<f64> = rs.iter().map(|r| lcs_table(h, r) as f64 / h.len().max(1) as f64).collect();
        let recs: Vec<f64> = rs.iter().map(|r| lcs_table(h, r) as f64 / r.len().max(1) as f64).collect();
        let p = precs.into_iter().fold(0.0, f64::max);
        let rc = recs.into_iter().fold(0.0, f64::max);
        if p != 0.0 && rc != 0.0 {
            total += (1.0 + beta.powi(2)) * p * rc / (rc + beta.powi(2) * p);
        }
    }
    total / hyps.len() as f64
}

pub fn cider(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let n_docs = refs.len() as f64;
    let mut by_n = [0.0f64; 4];
    for n in 1..=4 {
        let mut df: BTreeMap<String, f64> = BTreeMap::new();
        for rs in refs {
            let mut present: BTreeMap<String, ()> = BTreeMap::new();
            for r in rs {
                for g in grams(r, n).keys() {
                    present.insert(g.clone(), ());
                }
            }
            for g in present.keys() {
                *df.entry(g.clone()).or_insert(0.0) += 1.0;
            }
        }
        let tfidf = |tokens: &[String]| -> BTreeMap<String, f64> {
            grams(tokens, n)
                .into_iter()
                .map(|(g, tf)| {
                    let d = df.get(&g).copied().unwrap_or(0.0).max(1.0);
                    let w = tf * (n_docs / d).ln();
                    (g, w)
                })
                .collect()
        };
        let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
        for (h, rs) in hyps.iter().zip(refs) {
            let hv = tfidf(h);
            let mut acc = 0.0;
            for r in rs {
                let rv = tfidf(r);
                let denom = norm(&hv) * norm(&rv);
                if denom > 0.0 {
                    let num: f64 = hv.iter().filter_map(|(g, x)| rv.get(g).map(|y| x * y)).sum();
                    acc += num / denom;
                }
            }
            by_n[n - 1] += acc / rs.len() as f64 / hyps.len() as f64;
        }
    }
    by_n.iter().sum::<f64>() / 4.0 * 10.0
}

pub fn macro_f1(gold: &[usize], pred: &[usize], classes: usize) -> f64 {
    let mut confusion = vec![vec![0.0f64; classes]; classes];
    for (&g, &p) in gold.iter().zip(pred) {
        confusion[g][p] += 1.0;
    }
    let mut sum = 0.0;
    for c in 0..classes {
        let tp = confusion[c][c];
        let predicted: f64 = (0..classes).map(|g| confusion[g][c]).sum();
        let actual: f64 = confusion[c].iter().sum();
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    sum / classes as f64
}

const WORDS: [&str; 7] = ["red", "dress", "a", "with", "long", "sleeves", "blue"];

fn sentence(rng: &mut ChaCha8Rng) -> Vec<String> {
    let len = rng.gen_range(2..9);
    (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
}

/// A random caption corpus whose hypotheses are mutated copies of one
/// of their references, so all n-gram orders usually overlap.
pub fn caption_fixture(rng: &mut ChaCha8Rng) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    let items = rng.gen_range(2..6);
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..items {
        let rs: Vec<Vec<String>> = (0..rng.gen_range(1..4)).map(|_| sentence(rng)).collect();
        let mut h = rs[0].clone();
        for _ in 0..rng.gen_range(0..3) {
            let i = rng.gen_range(0..h.len());
            h[i] = WORDS[rng.gen_range(0..WORDS.len())].to_string();
        }
        if rng.gen_bool(0.3) {
            h.push(WORDS[rng.gen_range(0..WORDS.len())].to_string());
        }
        hyps.push(h);
        refs.push(rs);
    }
    (hyps, refs)
}

pub fn label_fixture(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, usize) {
    let classes = rng.gen_range(2..6);
    let n = rng.gen_range(5..30);
    let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let pred = gold
        .iter()
        .map(|&g| if rng.gen_bool(0.6) { g } else { rng.gen_range(0..classes) })
        .collect();
    (gold, pred, classes)
}
