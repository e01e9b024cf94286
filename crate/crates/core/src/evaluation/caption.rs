//! BLEU-4, ROUGE-L and CIDEr over lowercased word tokens.

use std::collections::HashMap;

use crate::model::tokenize;

type Ngrams = HashMap<Vec<String>, usize>;

fn ngrams(tokens: &[String], n: usize) -> Ngrams {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4: clipped n-gram precisions pooled over the corpus,
/// uniform weights, brevity penalty against the closest reference length
/// (shorter on ties).
pub fn bleu4(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, refs) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let hg = ngrams(h, n);
            let mut max_ref: Ngrams = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &hg {
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || (0..4).any(|i| matched[i] == 0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_p.exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;

/// Sentence ROUGE-L F-measure against the best-matching reference
/// precision and recall, averaged over the corpus.
pub fn rouge_l(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> f64 {
    if hypotheses.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for (h, refs) in hypotheses.iter().zip(references) {
        let (mut best_p, mut best_r) = (0.0f64, 0.0f64);
        for r in refs {
            let l = lcs(h, r) as f64;
            if !h.is_empty() {
                best_p = best_p.max(l / h.len() as f64);
            }
            if !r.is_empty() {
                best_r = best_r.max(l / r.len() as f64);
            }
        }
        let b2 = ROUGE_BETA * ROUGE_BETA;
        if best_p > 0.0 && best_r > 0.0 {
            sum += (1.0 + b2) * best_p * best_r / (best_r + b2 * best_p);
        }
    }
    sum / hypotheses.len() as f64
}

/// CIDEr on the usual 0–10 scale: for n = 1..4 the cosine between
/// TF-IDF n-gram vectors of hypothesis and each reference, averaged over
/// references, then over n, times 10. Document frequencies come from the
/// reference sets.
pub fn cider(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> f64 {
    let docs = references.len();
    if docs == 0 {
        return 0.0;
    }
    let log_docs = (docs as f64).ln();
    let mut score = 0.0;
    for n in 1..=4 {
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for refs in references {
            let mut seen: Vec<Vec<String>> = refs.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            seen.sort();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let vector = |grams: Ngrams| -> (HashMap<Vec<String>, f64>, f64) {
            let v: HashMap<Vec<String>, f64> = grams
                .into_iter()
                .map(|(g, c)| {
                    let idf = log_docs - (df.get(&g).copied().unwrap_or(0).max(1) as f64).ln();
                    (g, c as f64 * idf)
                })
                .collect();
            let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
            (v, norm)
        };
        let mut per_n = 0.0;
        for (h, refs) in hypotheses.iter().zip(references) {
            let (hv, hn) = vector(ngrams(h, n));
            let mut s = 0.0;
            for r in refs {
                let (rv, rn) = vector(ngrams(r, n));
                if hn > 0.0 && rn > 0.0 {
                    let dot: f64 = hv.iter().map(|(g, x)| x * rv.get(g).copied().unwrap_or(0.0)).sum();
                    s += dot / (hn * rn);
                }
            }
            if !refs.is_empty() {
                per_n += s / refs.len() as f64;
            }
        }
        score += per_n / hypotheses.len().max(1) as f64;
    }
    10.0 * score / 4.0
}

/// The three scores and their aggregate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptionScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl CaptionScores {
    /// `100·B + 100·R + 10·C`: every score on a 0–100 scale, METEOR
    /// left out.
    pub fn sum(&self) -> f64 {
        100.0 * self.bleu4 + 100.0 * self.rouge_l + 10.0 * self.cider
    }
}

/// Scores raw strings. Each hypothesis has one or more references.
pub fn caption_metrics<S: AsRef<str>>(hypotheses: &[S], references: &[Vec<S>]) -> Result<CaptionScores, String> {
    if hypotheses.is_empty() {
        return Err("no hypotheses to score".into());
    }
    if hypotheses.len() != references.len() {
        return Err(format!("{} hypotheses, {} reference sets", hypotheses.len(), references.len()));
    }
    let h: Vec<Vec<String>> = hypotheses.iter().map(|s| tokenize(s.as_ref())).collect();
    let r: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|rs| rs.iter().map(|s| tokenize(s.as_ref())).collect())
        .collect();
    Ok(CaptionScores {
        bleu4: bleu4(&h, &r),
        rouge_l: rouge_l(&h, &r),
        cider: cider(&h, &r),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_scores_one() {
        let s = caption_metrics(&["a red striped wrap dress ."], &[vec!["a red striped wrap dress ."]]).unwrap();
        assert!((s.bleu4 - 1.0).abs() < 1e-12);
        assert!((s.rouge_l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_four_gram_overlap_is_zero() {
        let s = caption_metrics(&["red dress blue skirt"], &[vec!["blue skirt red dress"]]).unwrap();
        assert_eq!(s.bleu4, 0.0);
        assert!(s.rouge_l > 0.0);
    }

    #[test]
    fn cider_rewards_distinctive_ngrams() {
        let refs = vec![vec!["a red dress"], vec!["a blue skirt"]];
        let good = caption_metrics(&["a red dress", "a blue skirt"], &refs).unwrap();
        let bad = caption_metrics(&["a blue skirt", "a red dress"], &refs).unwrap();
        assert!(good.cider > 1.0 && bad.cider < 1e-12, "{good:?} {bad:?}");
    }

    #[test]
    fn empty_input_rejected() {
        assert!(caption_metrics::<&str>(&[], &[]).is_err());
    }
}
