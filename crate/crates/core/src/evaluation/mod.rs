//! Downstream evaluation: the 101-candidate cross-modal protocol,
//! full-gallery retrieval with text feedback, classification and caption
//! metrics.
//!
//! ```
//! use fadvlp::evaluation::{caption_metrics, macro_f1, recall_from_ranks};
//!
//! assert!((recall_from_ranks(&[1, 3, 11], 10) - 66.666_666_666_666_67).abs() < 1e-9);
//! assert!((macro_f1(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
//! let s = caption_metrics(&["is red and has a midi length"], &[vec!["is red and has a midi length"]]).unwrap();
//! assert_eq!((s.bleu4, s.rouge_l), (1.0, 1.0));
//! ```

mod caption;
mod metrics;
mod retrieval;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use caption::{bleu4, caption_metrics, cider, rouge_l, CaptionScores, ROUGE_BETA};
pub use metrics::{accuracy, macro_f1, rank_of, recall_at_k, recall_from_ranks};
pub use retrieval::{
    crossmodal_protocol, dot, feedback_ranks, sample_negatives, Direction, ProtocolParams, ProtocolResult,
    RetrievalGallery,
};

use crate::corpus::{CorpusRecord, FeedbackTriplet};
use crate::model::{generate, Decode, FadVlpModel, GenerateOptions, Mode, Session, TextBatch, Vocabulary};
use crate::trainer::{encode_texts, ImageStore};
use crate::TensorError;

/// Rows per forward pass when embedding.
pub const CHUNK: usize = 64;

/// Named results of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub protocol: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn new(task: &str) -> Self {
        MetricsReport {
            task: task.to_string(),
            metrics: BTreeMap::new(),
            protocol: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub const CSV_HEADER: &'static str = "task,metric,value";

    /// One `task,metric,value` line per metric, in name order.
    pub fn csv_rows(&self) -> String {
        self.metrics
            .iter()
            .map(|(k, v)| format!("{},{k},{v}\n", self.task))
            .collect()
    }
}

/// Reports as a CSV table with a header line.
pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!("{}\n", MetricsReport::CSV_HEADER);
    for r in reports {
        out.push_str(&r.csv_rows());
    }
    out
}

fn rows_of(values: &[f32], width: usize) -> Vec<Vec<f32>> {
    values.chunks(width).map(<[f32]>::to_vec).collect()
}

/// `f(i)` for each id.
pub fn embed_images(model: &FadVlpModel<f32>, images: &ImageStore, ids: &[u64]) -> Result<Vec<Vec<f32>>, TensorError> {
    let j = model.config().joint_dim;
    let chunks: Vec<Vec<Vec<f32>>> = ids
        .par_chunks(CHUNK)
        .map(|c| {
            let batch = images.batch(c).map_err(|e| TensorError::Invalid {
                op: "embed_images",
                detail: e,
            })?;
            let mut s = Session::eval(model);
            let enc = s.encode_images(&batch)?;
            let f = s.project("f", enc.pooled)?;
            Ok(rows_of(s.tape.value(f).data(), j))
        })
        .collect::<Result<_, TensorError>>()?;
    Ok(chunks.concat())
}

/// `g(t)` for each encoded caption.
pub fn embed_captions(model: &FadVlpModel<f32>, captions: &[Vec<u32>]) -> Result<Vec<Vec<f32>>, TensorError> {
    let j = model.config().joint_dim;
    let max_len = model.config().max_len;
    let chunks: Vec<Vec<Vec<f32>>> = captions
        .par_chunks(CHUNK)
        .map(|c| {
            let text = TextBatch::captions(c.to_vec(), max_len)?;
            let mut s = Session::eval(model);
            let enc = s.encode_text(&text, Mode::Align)?;
            let g = s.project("g", enc.pooled)?;
            Ok(rows_of(s.tape.value(g).data(), j))
        })
        .collect::<Result<_, TensorError>>()?;
    Ok(chunks.concat())
}

/// `h(m)` for each (reference, relative caption) pair.
pub fn embed_fused(
    model: &FadVlpModel<f32>,
    images: &ImageStore,
    references: &[u64],
    captions: &[Vec<u32>],
) -> Result<Vec<Vec<f32>>, TensorError> {
    let j = model.config().joint_dim;
    let max_len = model.config().max_len;
    let jobs: Vec<(&[u64], &[Vec<u32>])> = references.chunks(CHUNK).zip(captions.chunks(CHUNK)).collect();
    let chunks: Vec<Vec<Vec<f32>>> = jobs
        .par_iter()
        .map(|(ids, caps)| {
            let batch = images.batch(ids).map_err(|e| TensorError::Invalid {
                op: "embed_fused",
                detail: e,
            })?;
            let text = TextBatch::captions(caps.to_vec(), max_len)?;
            let mut s = Session::eval(model);
            let enc = s.encode_images(&batch)?;
            let m = s.fuse(&enc, &text)?;
            let h = s.project("h", m)?;
            Ok(rows_of(s.tape.value(h).data(), j))
        })
        .collect::<Result<_, TensorError>>()?;
    Ok(chunks.concat())
}

/// Image and caption embeddings of every record.
pub fn build_gallery(
    model: &FadVlpModel<f32>,
    images: &ImageStore,
    records: &[CorpusRecord],
    vocab: &Vocabulary,
) -> Result<RetrievalGallery, TensorError> {
    let ids: Vec<u64> = records.iter().map(|r| r.id).collect();
    let captions: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
    Ok(RetrievalGallery {
        images: embed_images(model, images, &ids)?,
        texts: embed_captions(model, &encode_texts(vocab, &captions, model.config().max_len))?,
        categories: records.iter().map(|r| r.category.clone()).collect(),
        subcategories: records.iter().map(|r| r.subcategory.clone()).collect(),
        ids,
    })
}

/// ITR or TIR report from a precomputed gallery.
pub fn crossmodal_report(
    gallery: &RetrievalGallery,
    queries: &[u64],
    direction: Direction,
    params: &ProtocolParams,
) -> Result<MetricsReport, String> {
    let result = crossmodal_protocol(gallery, queries, direction, params)?;
    let task = match direction {
        Direction::I2t => "itr",
        Direction::T2i => "tir",
    };
    let mut report = MetricsReport::new(task);
    for (k, v) in &result.recall {
        report.metrics.insert(format!("r@{k}"), *v);
    }
    report.metrics.insert("mean_recall".into(), mean(result.recall.values().copied()));
    report.protocol.insert("candidates".into(), params.candidates.into());
    report.protocol.insert("repeats".into(), params.repeats.into());
    report.protocol.insert("seed".into(), params.seed.into());
    report.protocol.insert("queries".into(), queries.len().into());
    report.protocol.insert("draws".into(), result.draws.into());
    Ok(report)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// IRTF: each query fuses the reference image with the joined feedback and
/// ranks every same-category gallery image but the reference. Reports
/// R@K per category and their average.
pub fn irtf_report(
    model: &FadVlpModel<f32>,
    images: &ImageStore,
    gallery: &RetrievalGallery,
    queries: &[FeedbackTriplet],
    vocab: &Vocabulary,
    ks: &[usize],
) -> Result<MetricsReport, String> {
    if queries.is_empty() {
        return Err("no IRTF queries".into());
    }
    let refs: Vec<u64> = queries.iter().map(|q| q.ref_id).collect();
    let tgts: Vec<u64> = queries.iter().map(|q| q.tgt_id).collect();
    let texts: Vec<String> = queries.iter().map(FeedbackTriplet::joined).collect();
    let caps = encode_texts(vocab, &texts, model.config().max_len);
    let fused = embed_fused(model, images, &refs, &caps).map_err(|e| e.to_string())?;
    let ranks = feedback_ranks(gallery, &fused, &refs, &tgts)?;
    let mut by_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (q, r) in queries.iter().zip(&ranks) {
        by_cat.entry(q.category.as_str()).or_default().push(*r);
    }
    let mut report = MetricsReport::new("irtf");
    for &k in ks {
        for (cat, rs) in &by_cat {
            report.metrics.insert(format!("{cat}/r@{k}"), recall_from_ranks(rs, k));
        }
        let avg = mean(by_cat.values().map(|rs| recall_from_ranks(rs, k)));
        report.metrics.insert(format!("average/r@{k}"), avg);
    }
    let sum: f64 = ks.iter().map(|k| report.metrics[&format!("average/r@{k}")]).sum();
    report.metrics.insert("mean_recall".into(), sum / ks.len().max(1) as f64);
    report.protocol.insert("queries".into(), queries.len().into());
    report.protocol.insert("gallery".into(), "same category, reference excluded".into());
    report.protocol.insert("ks".into(), serde_json::to_value(ks).unwrap());
    Ok(report)
}

/// Class predictions of head `cls.{task}` for (image, caption) pairs.
pub fn predict_classes(
    model: &FadVlpModel<f32>,
    images: &ImageStore,
    task: &str,
    ids: &[u64],
    captions: &[Vec<u32>],
) -> Result<Vec<usize>, TensorError> {
    let max_len = model.config().max_len;
    let jobs: Vec<(&[u64], &[Vec<u32>])> = ids.chunks(CHUNK).zip(captions.chunks(CHUNK)).collect();
    let chunks: Vec<Vec<usize>> = jobs
        .par_iter()
        .map(|(ids, caps)| {
            let batch = images.batch(ids).map_err(|e| TensorError::Invalid {
                op: "predict_classes",
                detail: e,
            })?;
            let text = TextBatch::captions(caps.to_vec(), max_len)?;
            let mut s = Session::eval(model);
            let enc = s.encode_images(&batch)?;
            let logits = s.classify(task, &enc, &text)?;
            let value = s.tape.value(logits);
            let classes = value.shape()[1];
            Ok(value
                .data()
                .chunks(classes)
                .map(|row| {
                    (0..classes)
                        .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                        .unwrap()
                })
                .collect())
        })
        .collect::<Result<_, TensorError>>()?;
    Ok(chunks.concat())
}

/// Accuracy (percent) and macro-F1.
pub fn classification_report(task: &str, gold: &[usize], predicted: &[usize], classes: usize) -> Result<MetricsReport, String> {
    let mut report = MetricsReport::new(task);
    report.metrics.insert("accuracy".into(), accuracy(gold, predicted)?);
    report.metrics.insert("macro_f1".into(), macro_f1(gold, predicted, classes)?);
    report.protocol.insert("items".into(), gold.len().into());
    report.protocol.insert("classes".into(), classes.into());
    Ok(report)
}

/// Caption report with BLEU-4, ROUGE-L, CIDEr and their sum.
pub fn caption_report(task: &str, hypotheses: &[String], references: &[Vec<String>]) -> Result<MetricsReport, String> {
    let s = caption_metrics(hypotheses, references)?;
    let mut report = MetricsReport::new(task);
    report.metrics.insert("bleu4".into(), s.bleu4);
    report.metrics.insert("rouge_l".into(), s.rouge_l);
    report.metrics.insert("cider".into(), s.cider);
    report.metrics.insert("sum".into(), s.sum());
    report.protocol.insert("items".into(), hypotheses.len().into());
    report
        .notes
        .push("sum = 100*bleu4 + 100*rouge_l + 10*cider; METEOR is not computed".into());
    Ok(report)
}

/// Greedy captions for the given images.
pub fn generate_captions(
    model: &FadVlpModel<f32>,
    images: &ImageStore,
    ids: &[u64],
    vocab: &Vocabulary,
    max_tokens: usize,
) -> Result<Vec<String>, TensorError> {
    let opts = GenerateOptions {
        decode: Decode::Greedy,
        max_tokens,
        seed: 0,
    };
    let chunks: Vec<Vec<String>> = ids
        .par_chunks(CHUNK)
        .map(|c| {
            let batch = images.batch(c).map_err(|e| TensorError::Invalid {
                op: "generate_captions",
                detail: e,
            })?;
            let out = generate(model, Mode::Align, &[&batch], &opts)?;
            Ok(out.iter().map(|t| vocab.decode(t)).collect())
        })
        .collect::<Result<_, TensorError>>()?;
    Ok(chunks.concat())
}

/// Relative captions for (reference, target) pairs, one per row.
pub fn generate_relative_captions(
    model: &FadVlpModel<f32>,
    images: &ImageStore,
    references: &[u64],
    targets: &[u64],
    vocab: &Vocabulary,
    decode: Decode,
    max_tokens: usize,
    seed: u64,
) -> Result<Vec<String>, TensorError> {
    let jobs: Vec<(usize, (&[u64], &[u64]))> =
        references.chunks(CHUNK).zip(targets.chunks(CHUNK)).enumerate().collect();
    let chunks: Vec<Vec<String>> = jobs
        .par_iter()
        .map(|(i, (r, t))| {
            let err = |e: String| TensorError::Invalid {
                op: "generate_relative_captions",
                detail: e,
            };
            let rb = images.batch(r).map_err(err)?;
            let tb = images.batch(t).map_err(err)?;
            let opts = GenerateOptions {
                decode,
                max_tokens,
                seed: seed.wrapping_add(*i as u64),
            };
            let out = generate(model, Mode::RelCap, &[&rb, &tb], &opts)?;
            Ok(out.iter().map(|t| vocab.decode(t)).collect())
        })
        .collect::<Result<_, TensorError>>()?;
    Ok(chunks.concat())
}

/// RIC: two nucleus draws per pair, with seeds `seed` and `seed + 1`,
/// joined with " and " and scored against the joined gold phrases.
pub fn ric_report(
    model: &FadVlpModel<f32>,
    images: &ImageStore,
    queries: &[FeedbackTriplet],
    vocab: &Vocabulary,
    p: f64,
    max_tokens: usize,
    seed: u64,
) -> Result<MetricsReport, String> {
    let refs: Vec<u64> = queries.iter().map(|q| q.ref_id).collect();
    let tgts: Vec<u64> = queries.iter().map(|q| q.tgt_id).collect();
    let draw = |s: u64| {
        generate_relative_captions(model, images, &refs, &tgts, vocab, Decode::Nucleus { p }, max_tokens, s)
            .map_err(|e| e.to_string())
    };
    let (first, second) = (draw(seed)?, draw(seed.wrapping_add(1))?);
    let hyps: Vec<String> = first.iter().zip(&second).map(|(a, b)| format!("{a} and {b}")).collect();
    let refs: Vec<Vec<String>> = queries.iter().map(|q| vec![q.joined()]).collect();
    let mut report = caption_report("ric", &hyps, &refs)?;
    report.protocol.insert("nucleus_p".into(), p.into());
    report.protocol.insert("seeds".into(), serde_json::json!([seed, seed.wrapping_add(1)]));
    Ok(report)
}
