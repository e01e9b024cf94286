use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{Session, TextBatch};
use super::params::FadVlpModel;
use super::vocab::{Mode, Vocabulary, BOS, EOS, PAD};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Keeps the smallest set of most-probable tokens whose mass reaches `p`
/// and renormalises it; everything else becomes zero. Sorting is by
/// probability descending, ties by token id ascending.
///
/// ```
/// let kept = fadvlp::model::nucleus_filter(&[0.5, 0.3, 0.15, 0.05], 0.9).unwrap();
/// assert!((kept[0] - 0.5 / 0.95).abs() < 1e-12);
/// assert_eq!(kept[3], 0.0);
/// ```
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<Vec<f64>, TensorError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(TensorError::Invalid {
            op: "nucleus_filter",
            detail: format!("p = {p} outside (0, 1]"),
        });
    }
    let total: f64 = probs.iter().sum();
    if probs.is_empty() || probs.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(TensorError::Invalid {
            op: "nucleus_filter",
            detail: format!("not a distribution (mass {total})"),
        });
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        out[i] = probs[i];
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    out.iter_mut().for_each(|x| *x /= mass);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Decode {
    Greedy,
    Nucleus { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub decode: Decode,
    /// Most tokens to emit after `[BOS]`.
    pub max_tokens: usize,
    pub seed: u64,
}

fn softmax_allowed(logits: &[f64]) -> Vec<f64> {
    let allowed = |i: usize| !Vocabulary::is_forbidden_output(i as u32);
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|x| *x /= z);
    probs
}

fn sample(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Generates one text per batch row. `images` holds one `[B, H, W, C]`
/// batch for [`Mode::Align`] (captioning) and two for [`Mode::RelCap`]
/// (reference, target). Each output excludes `[BOS]`, ends with `[EOS]`
/// when the model emitted it, and never contains padding, `[BOS]`,
/// `[UNK]` or mode tokens.
pub fn generate<T: Scalar>(
    model: &FadVlpModel<T>,
    mode: Mode,
    images: &[&Tensor<T>],
    opts: &GenerateOptions,
) -> Result<Vec<Vec<u32>>, TensorError> {
    let arity = match mode {
        Mode::Align => 1,
        Mode::RelCap => 2,
        Mode::Fuse => 0,
    };
    if arity == 0 || images.len() != arity {
        return Err(TensorError::Invalid {
            op: "generate",
            detail: format!("{mode:?} mode given {} image batches", images.len()),
        });
    }
    if images.len() == 2 && images[0].shape() != images[1].shape() {
        return Err(TensorError::Invalid {
            op: "generate",
            detail: "reference and target batches differ in shape".into(),
        });
    }
    if let Decode::Nucleus { p } = opts.decode {
        nucleus_filter(&[1.0], p)?;
    }
    let max_len = model.config().max_len;
    let steps = opts.max_tokens.min(max_len - 1);
    let batch = images[0].shape().first().copied().unwrap_or(0);

    let mut session = Session::eval(model);
    let first = session.encode_images(images[0])?;
    let second = match images.get(1) {
        Some(t) => Some(session.encode_images(t)?),
        None => None,
    };
    let images_end = session.tape.len();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut prefixes = vec![vec![BOS]; batch];
    let mut done = vec![false; batch];
    for _ in 0..steps {
        if done.iter().all(|&d| d) {
            break;
        }
        let text = TextBatch::prefixes(prefixes.clone(), max_len)?;
        let logits = session.next_token_logits(&text, mode, &first, second.as_ref())?;
        let values = session.tape.value(logits).clone();
        let v = values.shape()[1];
        for (b, row) in values.data().chunks_exact(v).enumerate() {
            if done[b] {
                prefixes[b].push(PAD);
                continue;
            }
            let row64: Vec<f64> = row.iter().map(|x| x.to_f64().unwrap()).collect();
            let probs = softmax_allowed(&row64);
            let token = match opts.decode {
                Decode::Greedy => probs
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                    .0,
                Decode::Nucleus { p } => sample(&nucleus_filter(&probs, p)?, &mut rng),
            } as u32;
            prefixes[b].push(token);
            done[b] = token == EOS;
        }
        session.tape.truncate(images_end);
        session.forget_after(images_end);
    }
    Ok(prefixes
        .into_iter()
        .map(|p| p.into_iter().skip(1).take_while(|&t| t != PAD).collect())
        .collect())
}
