//! End-to-end runs: data, pseudo-triplets, pre-training, fine-tuning and
//! evaluation, each stage reading and writing files in one directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    feedback_triplets, generate_corpus, read_corpus, read_jsonl, split_holdout, write_corpus, write_jsonl,
    AttributeSchema, CorpusRecord, FeedbackTriplet,
};
use crate::evaluation::{
    build_gallery, caption_report, classification_report, crossmodal_report, generate_captions, irtf_report,
    predict_classes, reports_csv, ric_report, Direction, MetricsReport, ProtocolParams,
};
use crate::model::{FadVlpModel, ModelConfig, Vocabulary};
use crate::trainer::{
    encode_texts, finetune, loss_csv, pretrain, Checkpoint, Counters, FinetuneConfig, ImageStore, PretrainData,
    RngState, Task, TaskData, TrainConfig,
};
use crate::triplets::{
    build_triplet_dataset, prepare_entries, LexiconTagger, PseudoTriplet, StoredFeatures, SyntheticFeatures,
    TripletConfig, TripletStats,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    /// Rejected before any work started.
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Invalid(_) => 1,
            PipelineError::Runtime(_) => 2,
        }
    }
}

fn rt<E: std::fmt::Display>(e: E) -> PipelineError {
    PipelineError::Runtime(e.to_string())
}

/// Which features drive target selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// One-hot attributes and bag-of-words captions.
    #[default]
    Synthetic,
    /// `image_features` / `text_features` stored on each record.
    Stored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackConfig {
    /// Targets per reference when building fine-tuning triplets.
    pub train_per_reference: usize,
    /// Targets per holdout reference when building evaluation queries.
    pub eval_per_reference: usize,
    pub ks: Vec<usize>,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            train_per_reference: 2,
            eval_per_reference: 2,
            ks: vec![10, 50],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub max_tokens: usize,
    pub nucleus_p: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_tokens: 23,
            nucleus_p: 0.9,
        }
    }
}

/// Every knob of a run. Missing fields take defaults; unknown ones are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus_size: usize,
    pub holdout_fraction: f64,
    pub schema: AttributeSchema,
    pub model: ModelConfig,
    pub triplets: TripletConfig,
    pub features: FeatureSource,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    /// Per-task step overrides for fine-tuning.
    pub finetune_steps: BTreeMap<Task, usize>,
    pub tasks: Vec<Task>,
    pub protocol: ProtocolParams,
    pub feedback: FeedbackConfig,
    pub generation: GenerationConfig,
    /// Adds a wall-time column to loss CSVs, which makes them differ
    /// between otherwise identical runs.
    pub log_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schema = AttributeSchema::default();
        let model = ModelConfig {
            vocab_size: schema.vocabulary().len(),
            temperature: 0.1,
            ..ModelConfig::default()
        };
        RunConfig {
            seed: 7,
            corpus_size: 2000,
            holdout_fraction: 0.03,
            schema,
            model,
            triplets: TripletConfig::default(),
            features: FeatureSource::default(),
            pretrain: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            finetune_steps: BTreeMap::new(),
            tasks: Task::ALL.to_vec(),
            protocol: ProtocolParams::default(),
            feedback: FeedbackConfig::default(),
            generation: GenerationConfig::default(),
            log_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Invalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    /// Every check that does not need data on disk.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Invalid(m));
        self.schema.validate().map_err(PipelineError::Invalid)?;
        self.model.validate().map_err(|e| PipelineError::Invalid(e.to_string()))?;
        let vocab = self.schema.vocabulary().len();
        if self.model.vocab_size < vocab {
            return bad(format!("model.vocab_size {} is below the schema vocabulary of {vocab}", self.model.vocab_size));
        }
        if self.corpus_size < 2 {
            return bad("corpus_size must be at least 2".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout_fraction {} outside (0, 1)", self.holdout_fraction));
        }
        self.pretrain.validate().map_err(|e| PipelineError::Invalid(e.to_string()))?;
        if self.finetune.batch_size < 2 {
            return bad("finetune.batch_size must be at least 2".into());
        }
        if self.protocol.candidates < 2 || self.protocol.repeats == 0 {
            return bad("protocol needs at least 2 candidates and 1 repeat".into());
        }
        if self.protocol.ks.iter().any(|&k| k == 0 || k > self.protocol.candidates) {
            return bad("protocol K values must lie in 1..=candidates".into());
        }
        if self.feedback.ks.contains(&0) {
            return bad("feedback K values must be positive".into());
        }
        if !(self.generation.nucleus_p > 0.0 && self.generation.nucleus_p <= 1.0) {
            return bad("generation.nucleus_p must lie in (0, 1]".into());
        }
        if self.triplets.sample_size == 0 {
            return bad("triplets.sample_size must be positive".into());
        }
        Ok(())
    }

    fn steps_for(&self, task: Task) -> usize {
        self.finetune_steps.get(&task).copied().unwrap_or(self.finetune.steps)
    }
}

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const CORPUS: &str = "corpus.jsonl";
    pub const SCHEMA: &str = "schema.json";
    pub const SPLIT: &str = "split.json";
    pub const TRIPLETS: &str = "triplets.jsonl";
    pub const TRIPLET_STATS: &str = "triplet_stats.json";
    pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
    pub const PRETRAIN_LOSS: &str = "pretrain_loss.csv";
    pub const METRICS_JSON: &str = "metrics.json";
    pub const METRICS_CSV: &str = "metrics.csv";

    pub fn finetune_ckpt(task: &str) -> String {
        format!("finetune_{task}.ckpt")
    }

    pub fn finetune_loss(task: &str) -> String {
        format!("finetune_{task}_loss.csv")
    }
}

/// Train and holdout ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<u64>,
    pub holdout: Vec<u64>,
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(|e| PipelineError::Runtime(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    write(path, serde_json::to_string_pretty(value).map_err(rt)? + "\n")
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Runtime(format!("{}: {e}", path.display())))
}

/// Creates `out_dir` and writes the effective config into it.
pub fn prepare_out_dir(cfg: &RunConfig, out_dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::Runtime(format!("{}: {e}", out_dir.display())))?;
    write(&out_dir.join(files::CONFIG), cfg.to_json())
}

/// Writes the synthetic corpus and its schema.
pub fn gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<CorpusRecord>, PipelineError> {
    let records = generate_corpus(&cfg.schema, cfg.corpus_size, cfg.seed).map_err(rt)?;
    write_corpus(&out_dir.join(files::CORPUS), &records).map_err(rt)?;
    write_json(&out_dir.join(files::SCHEMA), &cfg.schema)?;
    Ok(records)
}

/// Seeded holdout split of a corpus.
pub fn make_split(cfg: &RunConfig, records: &[CorpusRecord]) -> Result<Split, PipelineError> {
    let (train, holdout) = split_holdout(records, cfg.holdout_fraction, cfg.seed).map_err(rt)?;
    Ok(Split {
        train: train.iter().map(|r| r.id).collect(),
        holdout: holdout.iter().map(|r| r.id).collect(),
    })
}

pub fn subset(records: &[CorpusRecord], ids: &[u64]) -> Vec<CorpusRecord> {
    let by_id: HashMap<u64, &CorpusRecord> = records.iter().map(|r| (r.id, r)).collect();
    ids.iter().filter_map(|id| by_id.get(id).map(|r| (*r).clone())).collect()
}

/// Pseudo-triplets with the configured feature source and the lexicon
/// tagger of `schema`.
pub fn build_triplets(
    cfg: &RunConfig,
    records: &[CorpusRecord],
) -> Result<(Vec<PseudoTriplet>, TripletStats), PipelineError> {
    let tagger = LexiconTagger::for_schema(&cfg.schema);
    let entries = match cfg.features {
        FeatureSource::Synthetic => prepare_entries(records, &SyntheticFeatures::new(&cfg.schema), &tagger),
        FeatureSource::Stored => prepare_entries(records, &StoredFeatures, &tagger),
    }
    .map_err(rt)?;
    let tcfg = TripletConfig {
        seed: cfg.triplets.seed ^ cfg.seed,
        ..cfg.triplets
    };
    build_triplet_dataset(&entries, &tcfg).map_err(rt)
}

/// Pairs from `train` and triplets whose two ends both lie in `train`.
pub fn pretrain_data(
    vocab: &Vocabulary,
    max_len: usize,
    train: &[CorpusRecord],
    triplets: &[PseudoTriplet],
) -> PretrainData {
    let captions: HashMap<u64, Vec<u32>> = train.iter().map(|r| (r.id, vocab.encode(&r.caption, max_len))).collect();
    let triplets = triplets
        .iter()
        .filter(|t| captions.contains_key(&t.ref_id) && captions.contains_key(&t.tgt_id))
        .map(|t| (t.ref_id, t.tgt_id, vocab.encode(&t.relative_caption, max_len)))
        .collect();
    PretrainData {
        pair_ids: train.iter().map(|r| r.id).collect(),
        captions,
        triplets,
    }
}

fn category_index(schema: &AttributeSchema, r: &CorpusRecord) -> Result<usize, String> {
    schema
        .category(&r.category)
        .map(|(i, _)| i)
        .ok_or_else(|| format!("item {}: unknown category {}", r.id, r.category))
}

fn subcategory_index(schema: &AttributeSchema, r: &CorpusRecord) -> Result<usize, String> {
    schema
        .subcategories()
        .position(|s| s == r.subcategory)
        .ok_or_else(|| format!("item {}: unknown subcategory {}", r.id, r.subcategory))
}

/// Class labels and class count for CR or SR.
pub fn labels(
    schema: &AttributeSchema,
    task: Task,
    records: &[CorpusRecord],
) -> Result<(Vec<usize>, usize), PipelineError> {
    let (f, n): (fn(&AttributeSchema, &CorpusRecord) -> Result<usize, String>, usize) = match task {
        Task::Cr => (category_index, schema.categories.len()),
        Task::Sr => (subcategory_index, schema.subcategories().count()),
        _ => return Err(PipelineError::Runtime(format!("task {task} has no labels"))),
    };
    let ls = records.iter().map(|r| f(schema, r)).collect::<Result<_, _>>().map_err(rt)?;
    Ok((ls, n))
}

/// Fine-tuning data for `task` drawn from the training split.
pub fn task_data(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    train: &[CorpusRecord],
    task: Task,
) -> Result<TaskData, PipelineError> {
    let max_len = cfg.model.max_len;
    let ids: Vec<u64> = train.iter().map(|r| r.id).collect();
    let captions = || encode_texts(vocab, &train.iter().map(|r| r.caption.as_str()).collect::<Vec<_>>(), max_len);
    Ok(match task {
        Task::Itr | Task::Tir | Task::Ic => TaskData::Pairs {
            ids,
            captions: captions(),
        },
        Task::Cr | Task::Sr => {
            let (labels, classes) = labels(&cfg.schema, task, train)?;
            TaskData::Labeled {
                ids,
                captions: captions(),
                labels,
                classes,
            }
        }
        Task::Irtf | Task::Ric => {
            let fb = feedback_triplets(train, train, cfg.feedback.train_per_reference, cfg.seed);
            let (mut references, mut targets, mut texts) = (Vec::new(), Vec::new(), Vec::new());
            for t in &fb {
                let rows: Vec<String> = if task == Task::Irtf {
                    vec![t.joined()]
                } else {
                    t.feedback.to_vec()
                };
                for text in rows {
                    references.push(t.ref_id);
                    targets.push(t.tgt_id);
                    texts.push(text);
                }
            }
            TaskData::Triplets {
                references,
                targets,
                captions: encode_texts(vocab, &texts, max_len),
            }
        }
    })
}

/// Evaluation queries for IRTF and RIC: holdout references, targets from
/// the whole corpus.
pub fn eval_feedback(cfg: &RunConfig, records: &[CorpusRecord], holdout: &[CorpusRecord]) -> Vec<FeedbackTriplet> {
    feedback_triplets(records, holdout, cfg.feedback.eval_per_reference, cfg.seed ^ 0x6576_616c)
}

/// Everything evaluation needs, computed once per run.
pub struct EvalContext<'a> {
    pub cfg: &'a RunConfig,
    pub vocab: &'a Vocabulary,
    pub images: &'a ImageStore,
    pub records: &'a [CorpusRecord],
    pub holdout: &'a [CorpusRecord],
    pub feedback: Vec<FeedbackTriplet>,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        cfg: &'a RunConfig,
        vocab: &'a Vocabulary,
        images: &'a ImageStore,
        records: &'a [CorpusRecord],
        holdout: &'a [CorpusRecord],
    ) -> Self {
        EvalContext {
            cfg,
            vocab,
            images,
            records,
            holdout,
            feedback: eval_feedback(cfg, records, holdout),
        }
    }

    pub fn evaluate(&self, task: Task, model: &FadVlpModel<f32>) -> Result<MetricsReport, PipelineError> {
        let holdout_ids: Vec<u64> = self.holdout.iter().map(|r| r.id).collect();
        let max_len = self.cfg.model.max_len;
        match task {
            Task::Itr | Task::Tir => {
                let gallery = build_gallery(model, self.images, self.records, self.vocab).map_err(rt)?;
                let dir = if task == Task::Itr { Direction::I2t } else { Direction::T2i };
                let params = ProtocolParams {
                    seed: self.cfg.protocol.seed ^ self.cfg.seed,
                    ..self.cfg.protocol.clone()
                };
                crossmodal_report(&gallery, &holdout_ids, dir, &params).map_err(rt)
            }
            Task::Irtf => {
                let gallery = build_gallery(model, self.images, self.records, self.vocab).map_err(rt)?;
                irtf_report(model, self.images, &gallery, &self.feedback, self.vocab, &self.cfg.feedback.ks).map_err(rt)
            }
            Task::Cr | Task::Sr => {
                let (gold, classes) = labels(&self.cfg.schema, task, self.holdout)?;
                let caps: Vec<&str> = self.holdout.iter().map(|r| r.caption.as_str()).collect();
                let caps = encode_texts(self.vocab, &caps, max_len);
                let pred = predict_classes(model, self.images, task.name(), &holdout_ids, &caps).map_err(rt)?;
                classification_report(task.name(), &gold, &pred, classes).map_err(rt)
            }
            Task::Ic => {
                let hyps = generate_captions(model, self.images, &holdout_ids, self.vocab, self.cfg.generation.max_tokens)
                    .map_err(rt)?;
                let refs: Vec<Vec<String>> = self.holdout.iter().map(|r| vec![r.caption.clone()]).collect();
                caption_report("ic", &hyps, &refs).map_err(rt)
            }
            Task::Ric => ric_report(
                model,
                self.images,
                &self.feedback,
                self.vocab,
                self.cfg.generation.nucleus_p,
                self.cfg.generation.max_tokens,
                self.cfg.seed,
            )
            .map_err(rt),
        }
    }
}

/// Where a finished pipeline left its artifacts.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub out_dir: PathBuf,
    pub reports: Vec<MetricsReport>,
    pub triplet_stats: TripletStats,
}

fn checkpoint_of(model: FadVlpModel<f32>, vocab: &Vocabulary, outcome_opt: crate::tensor::AdamState<f32>, rng: Option<RngState>, counters: Counters) -> Checkpoint {
    Checkpoint {
        model,
        vocabulary: vocab.clone(),
        optimizer: Some(outcome_opt),
        rng,
        counters,
    }
}

/// Pre-trains from scratch on `train` and `triplets`, writing the
/// checkpoint and loss curve into `out_dir`.
pub fn run_pretrain(
    cfg: &RunConfig,
    out_dir: &Path,
    vocab: &Vocabulary,
    images: &ImageStore,
    train: &[CorpusRecord],
    triplets: &[PseudoTriplet],
    progress: &mut dyn FnMut(&str),
) -> Result<Checkpoint, PipelineError> {
    let mut model = FadVlpModel::new(cfg.model.clone(), cfg.seed).map_err(rt)?;
    let data = pretrain_data(vocab, cfg.model.max_len, train, triplets);
    let tcfg = TrainConfig {
        seed: cfg.pretrain.seed ^ cfg.seed,
        ..cfg.pretrain
    };
    let outcome = pretrain(&mut model, images, &data, &tcfg, |r| {
        progress(&format!("pretrain step {} stage {} loss {:.4}", r.step, r.stage, r.total))
    })
    .map_err(rt)?;
    let csv = loss_csv(&outcome.log, cfg.log_wall_time.then_some(&outcome.wall_time[..]));
    write(&out_dir.join(files::PRETRAIN_LOSS), csv)?;
    let ck = checkpoint_of(
        model,
        vocab,
        outcome.optimizer,
        Some(RngState::capture(&outcome.rng)),
        Counters {
            stage1: cfg.pretrain.stage1_steps as u64,
            stage2: cfg.pretrain.stage2_steps as u64,
            ..Counters::default()
        },
    );
    ck.save(&out_dir.join(files::PRETRAIN_CKPT)).map_err(rt)?;
    Ok(ck)
}

/// Fine-tunes a copy of `base` on `task`, writing its checkpoint and loss
/// curve into `out_dir`.
pub fn run_finetune(
    cfg: &RunConfig,
    out_dir: &Path,
    base: &Checkpoint,
    images: &ImageStore,
    train: &[CorpusRecord],
    task: Task,
    progress: &mut dyn FnMut(&str),
) -> Result<Checkpoint, PipelineError> {
    let data = task_data(cfg, &base.vocabulary, train, task)?;
    let mut model = base.model.clone();
    let task_index = Task::ALL.iter().position(|&t| t == task).unwrap() as u64;
    let fcfg = FinetuneConfig {
        steps: cfg.steps_for(task),
        seed: cfg.finetune.seed ^ cfg.seed ^ (task_index + 1).wrapping_mul(0x1000_0000_01b3),
        ..cfg.finetune
    };
    let outcome = finetune(&mut model, images, task, &data, &fcfg, |r| {
        progress(&format!("finetune {} step {} loss {:.4}", r.task, r.step, r.loss))
    })
    .map_err(rt)?;
    let mut csv = String::from("step,task,loss\n");
    for r in &outcome.log {
        csv.push_str(&format!("{},{},{}\n", r.step, r.task, r.loss));
    }
    write(&out_dir.join(files::finetune_loss(task.name())), csv)?;
    let mut counters = base.counters.clone();
    counters.finetune += fcfg.steps as u64;
    counters.tasks.push(task.name().to_string());
    let ck = checkpoint_of(model, &base.vocabulary, outcome.optimizer, base.rng.clone(), counters);
    ck.save(&out_dir.join(files::finetune_ckpt(task.name()))).map_err(rt)?;
    Ok(ck)
}

/// Loads a corpus and its split from a run directory.
pub fn load_run_data(out_dir: &Path) -> Result<(Vec<CorpusRecord>, Split), PipelineError> {
    let records = read_corpus(&out_dir.join(files::CORPUS)).map_err(rt)?;
    let split: Split = read_json(&out_dir.join(files::SPLIT))?;
    Ok((records, split))
}

/// Reads pseudo-triplets written by [`build_triplets`].
pub fn load_triplets(path: &Path) -> Result<Vec<PseudoTriplet>, PipelineError> {
    read_jsonl(path).map_err(rt)
}

/// Runs every stage and writes every artifact under `out_dir`.
pub fn run_pipeline(
    cfg: &RunConfig,
    out_dir: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    prepare_out_dir(cfg, out_dir)?;
    progress("generating corpus");
    let records = gen_data(cfg, out_dir)?;
    let split = make_split(cfg, &records)?;
    write_json(&out_dir.join(files::SPLIT), &split)?;
    let train = subset(&records, &split.train);
    let holdout = subset(&records, &split.holdout);

    progress("building pseudo-triplets");
    let (triplets, stats) = build_triplets(cfg, &train)?;
    write_jsonl(&out_dir.join(files::TRIPLETS), &triplets).map_err(rt)?;
    write_json(&out_dir.join(files::TRIPLET_STATS), &stats)?;
    progress(&format!("{} triplets built, {} skipped", stats.built, stats.skipped));

    let vocab = cfg.schema.vocabulary();
    let images = ImageStore::render(&cfg.schema, &records).map_err(rt)?;
    let base = run_pretrain(cfg, out_dir, &vocab, &images, &train, &triplets, progress)?;

    let ctx = EvalContext::new(cfg, &vocab, &images, &records, &holdout);
    let mut reports = Vec::new();
    for &task in &cfg.tasks {
        let tuned = run_finetune(cfg, out_dir, &base, &images, &train, task, progress)?;
        let report = ctx.evaluate(task, &tuned.model)?;
        progress(&format!("{task}: {:?}", report.metrics));
        reports.push(report);
    }
    write_json(&out_dir.join(files::METRICS_JSON), &reports)?;
    write(&out_dir.join(files::METRICS_CSV), reports_csv(&reports))?;
    Ok(PipelineOutput {
        out_dir: out_dir.to_path_buf(),
        reports,
        triplet_stats: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 3}"#).is_ok());
        assert!(matches!(RunConfig::from_json(r#"{"sede": 3}"#), Err(PipelineError::Invalid(_))));
        assert!(RunConfig::from_json(r#"{"model": {"widht": 3}}"#).is_err());
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let bad = RunConfig {
            holdout_fraction: 1.5,
            ..RunConfig::default()
        };
        assert_eq!(bad.validate().unwrap_err().exit_code(), 1);
    }
}
