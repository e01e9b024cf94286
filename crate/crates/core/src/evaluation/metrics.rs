/// `100 · #(gold within the top k) / #queries`, from 1-based gold ranks.
pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Recall@k over ranked id lists. Every list must hold at least `k` ids.
pub fn recall_at_k(ranked: &[Vec<u64>], gold: &[u64], k: usize) -> Result<f64, String> {
    if ranked.len() != gold.len() {
        return Err(format!("{} ranked lists, {} gold ids", ranked.len(), gold.len()));
    }
    let mut ranks = Vec::with_capacity(gold.len());
    for (list, g) in ranked.iter().zip(gold) {
        if list.len() < k {
            return Err(format!("K = {k} exceeds a ranked list of {}", list.len()));
        }
        ranks.push(list.iter().position(|x| x == g).map_or(usize::MAX, |p| p + 1));
    }
    Ok(recall_from_ranks(&ranks, k))
}

/// 1-based rank of `scores[gold]`: one plus the number of strictly
/// higher scores.
pub fn rank_of(scores: &[f64], gold: usize) -> usize {
    1 + scores.iter().filter(|&&s| s > scores[gold]).count()
}

/// Percentage of matching labels.
pub fn accuracy(gold: &[usize], predicted: &[usize]) -> Result<f64, String> {
    if gold.is_empty() || gold.len() != predicted.len() {
        return Err(format!("{} gold labels, {} predictions", gold.len(), predicted.len()));
    }
    Ok(100.0 * gold.iter().zip(predicted).filter(|(a, b)| a == b).count() as f64 / gold.len() as f64)
}

/// Unweighted mean of per-class F1 over `classes` classes. A class with no
/// true positives scores 0 and still counts.
pub fn macro_f1(gold: &[usize], predicted: &[usize], classes: usize) -> Result<f64, String> {
    if gold.is_empty() || gold.len() != predicted.len() || classes == 0 {
        return Err(format!("{} gold labels, {} predictions", gold.len(), predicted.len()));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&g, &p) in gold.iter().zip(predicted) {
        if g >= classes || p >= classes {
            return Err(format!("label outside {classes} classes"));
        }
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let f1: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if tp[c] == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(f1 / classes as f64)
}
