//! Two-stage pre-training, per-task fine-tuning and checkpoints.
//!
//! Stage 1 optimises `CMC + ICLM` on image-caption pairs. Stage 2 draws a
//! batch of pseudo-triplets, uses their reference items as the pair batch
//! and adds `HMC + RCLM`. With bootstrapping on, each stage-2 row may have
//! its relative caption replaced by one sampled from the relative
//! captioner itself.

mod checkpoint;
mod data;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointError, Counters, RngState, FORMAT_VERSION};
pub use data::{encode_texts, select_rows, EpochSampler, ImageStore};

use crate::model::vocab::EOS;
use crate::model::{generate, Decode, FadVlpModel, GenerateOptions, Mode, Session, TextBatch};
use crate::objectives::{
    cmc_loss, hmc_loss, iclm_loss, rclm_loss, stage_loss, LmNormalization, LossRecord, LossWeights, PairBatch,
    TripletBatch,
};
use crate::tensor::{AdamConfig, AdamState, Reduction};
use crate::{Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Data(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss became non-finite at step {0}")]
    NonFinite(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    pub lm_normalization: LmNormalization,
    pub bootstrap: bool,
    pub bootstrap_probability: f64,
    /// Stage-2 steps before bootstrapping starts.
    pub bootstrap_start: usize,
    pub nucleus_p: f64,
    /// Longest generated relative caption, in tokens.
    pub bootstrap_max_tokens: usize,
    /// Progress cadence; 0 disables progress callbacks.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 2000,
            stage2_steps: 1500,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            lm_normalization: LmNormalization::default(),
            bootstrap: false,
            bootstrap_probability: 0.5,
            bootstrap_start: 500,
            nucleus_p: 0.9,
            bootstrap_max_tokens: 12,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.bootstrap_probability) {
            return bad("bootstrap_probability must lie in [0, 1]");
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return bad("nucleus_p must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Image ids, encoded captions and constructed triplets for pre-training.
#[derive(Debug, Clone, Default)]
pub struct PretrainData {
    pub pair_ids: Vec<u64>,
    /// Encoded caption for every pair id.
    pub captions: HashMap<u64, Vec<u32>>,
    /// `(reference, target, encoded relative caption)`.
    pub triplets: Vec<(u64, u64, Vec<u32>)>,
}

/// Everything a run produced, ready for a checkpoint.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub optimizer: AdamState<f32>,
    pub rng: ChaCha8Rng,
    pub log: Vec<LossRecord>,
    /// Seconds since the start of the run, one per logged record.
    pub wall_time: Vec<f64>,
    /// Stage-2 rows whose caption was replaced by a generated one.
    pub bootstrapped_rows: usize,
}

fn new_adam(model: &FadVlpModel<f32>, config: AdamConfig) -> AdamState<f32> {
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.numel()).collect();
    AdamState::new(config, &sizes)
}

/// Builds a loss in a fresh training session, differentiates it and takes
/// one Adam step. Returns the values of `extra` read off the tape.
fn optimise<F>(
    model: &mut FadVlpModel<f32>,
    adam: &mut AdamState<f32>,
    dropout_seed: u64,
    build: F,
) -> Result<(f64, Vec<Option<f64>>), TrainError>
where
    F: FnOnce(&mut Session<f32>) -> Result<(Var, Vec<Option<Var>>), TensorError>,
{
    if adam.first.len() != model.tensors().len() {
        *adam = AdamState {
            first: Vec::new(),
            second: Vec::new(),
            ..adam.clone()
        };
        for t in model.tensors() {
            adam.first.push(vec![0.0; t.numel()]);
            adam.second.push(vec![0.0; t.numel()]);
        }
    }
    let (total, extras, grads) = {
        let mut s = Session::train(model).with_dropout_seed(dropout_seed);
        let (loss, parts) = build(&mut s)?;
        let read = |v: Var| s.tape.value(v).data()[0] as f64;
        let total = read(loss);
        let extras: Vec<Option<f64>> = parts.iter().map(|p| p.map(read)).collect();
        if !total.is_finite() {
            return Err(TrainError::NonFinite(adam.step + 1));
        }
        (total, extras, s.gradients(loss)?)
    };
    let grads: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_deref()).collect();
    let mut params: Vec<&mut [f32]> = model.tensors_mut().iter_mut().map(|t| t.data_mut()).collect();
    adam.step(&mut params, &grads)?;
    Ok((total, extras))
}

/// With probability `probability` per row, replaces the row's relative
/// caption by a nucleus sample from the relative captioner conditioned on
/// its (reference, target) images. Returns the number of rows replaced.
pub fn bootstrap_relative_captions(
    model: &FadVlpModel<f32>,
    batch: &mut TripletBatch<f32>,
    probability: f64,
    p: f64,
    max_tokens: usize,
    rng: &mut impl Rng,
) -> Result<usize, TensorError> {
    let rows: Vec<usize> = (0..batch.captions.batch_size())
        .filter(|_| rng.gen::<f64>() < probability)
        .collect();
    let seed: u64 = rng.gen();
    if rows.is_empty() {
        return Ok(0);
    }
    let refs = select_rows(&batch.references, &rows);
    let tgts = select_rows(&batch.targets, &rows);
    let opts = GenerateOptions {
        decode: Decode::Nucleus { p },
        max_tokens,
        seed,
    };
    let generated = generate(model, Mode::RelCap, &[&refs, &tgts], &opts)?;
    let max_len = model.config().max_len;
    let mut captions: Vec<Vec<u32>> = batch.captions.rows().to_vec();
    for (&r, tokens) in rows.iter().zip(generated) {
        let mut row = vec![crate::model::vocab::BOS];
        row.extend(tokens.into_iter().filter(|&t| t != EOS));
        row.truncate(max_len - 1);
        row.push(EOS);
        captions[r] = row;
    }
    batch.captions = TextBatch::captions(captions, max_len)?;
    Ok(rows.len())
}

/// Runs stage 1 then stage 2 on `model` in place.
pub fn pretrain(
    model: &mut FadVlpModel<f32>,
    images: &ImageStore,
    data: &PretrainData,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let b = cfg.batch_size;
    let max_len = model.config().max_len;
    if cfg.stage1_steps > 0 && data.pair_ids.len() < b {
        return Err(TrainError::Data(format!("{} pairs for batch size {b}", data.pair_ids.len())));
    }
    for id in &data.pair_ids {
        if !data.captions.contains_key(id) || !images.contains(*id) {
            return Err(TrainError::Data(format!("pair {id} lacks a caption or an image")));
        }
    }
    if cfg.stage2_steps > 0 {
        if data.triplets.len() < b {
            return Err(TrainError::Data(format!("{} triplets for batch size {b}", data.triplets.len())));
        }
        for (r, t, _) in &data.triplets {
            if !data.captions.contains_key(r) || !images.contains(*r) || !images.contains(*t) {
                return Err(TrainError::Data(format!("triplet ({r}, {t}) refers to items outside the corpus")));
            }
        }
    }

    let mut adam = new_adam(model, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut wall_time = Vec::new();
    let mut bootstrapped_rows = 0;
    let start = Instant::now();
    let mut pair_sampler = EpochSampler::new(data.pair_ids.len());
    let mut triplet_sampler = EpochSampler::new(data.triplets.len());
    let total_steps = cfg.stage1_steps + cfg.stage2_steps;

    for step in 0..total_steps {
        let stage: u8 = if step < cfg.stage1_steps { 1 } else { 2 };
        let (pairs, triplets) = if stage == 1 {
            let idx = pair_sampler.next_batch(b, &mut rng);
            let ids: Vec<u64> = idx.iter().map(|&i| data.pair_ids[i]).collect();
            (pair_batch(images, &data.captions, ids, max_len)?, None)
        } else {
            let idx = triplet_sampler.next_batch(b, &mut rng);
            let chosen: Vec<&(u64, u64, Vec<u32>)> = idx.iter().map(|&i| &data.triplets[i]).collect();
            let ids: Vec<u64> = chosen.iter().map(|t| t.0).collect();
            let pairs = pair_batch(images, &data.captions, ids.clone(), max_len)?;
            let mut trip = TripletBatch {
                reference_ids: ids,
                target_ids: chosen.iter().map(|t| t.1).collect(),
                references: pairs.images.clone(),
                captions: TextBatch::captions(chosen.iter().map(|t| t.2.clone()).collect(), max_len)?,
                targets: images
                    .batch(&chosen.iter().map(|t| t.1).collect::<Vec<_>>())
                    .map_err(TrainError::Data)?,
            };
            if cfg.bootstrap && step - cfg.stage1_steps >= cfg.bootstrap_start {
                bootstrapped_rows += bootstrap_relative_captions(
                    model,
                    &mut trip,
                    cfg.bootstrap_probability,
                    cfg.nucleus_p,
                    cfg.bootstrap_max_tokens,
                    &mut rng,
                )?;
            }
            (pairs, Some(trip))
        };
        let dropout_seed = cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let (total, parts) = optimise(model, &mut adam, dropout_seed, |s| {
            let l = stage_loss(s, stage, &pairs, triplets.as_ref(), &cfg.weights, cfg.lm_normalization)?;
            Ok((l.total, vec![Some(l.cmc), Some(l.iclm), l.hmc, l.rclm]))
        })?;
        let record = LossRecord {
            step: step as u64 + 1,
            stage,
            cmc: parts[0].unwrap(),
            iclm: parts[1].unwrap(),
            hmc: parts[2],
            rclm: parts[3],
            total,
        };
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            progress(&record);
        }
        log.push(record);
        wall_time.push(start.elapsed().as_secs_f64());
    }
    Ok(TrainOutcome {
        optimizer: adam,
        rng,
        log,
        wall_time,
        bootstrapped_rows,
    })
}

fn pair_batch(
    images: &ImageStore,
    captions: &HashMap<u64, Vec<u32>>,
    ids: Vec<u64>,
    max_len: usize,
) -> Result<PairBatch<f32>, TrainError> {
    let rows = ids.iter().map(|id| captions[id].clone()).collect();
    Ok(PairBatch {
        images: images.batch(&ids).map_err(TrainError::Data)?,
        captions: TextBatch::captions(rows, max_len)?,
        ids,
    })
}

/// Loss CSV: one row per step, with a trailing wall-time column when
/// `wall_time` is given.
pub fn loss_csv(log: &[LossRecord], wall_time: Option<&[f64]>) -> String {
    let mut out = String::from(LossRecord::CSV_HEADER);
    if wall_time.is_some() {
        out.push_str(",wall_time");
    }
    out.push('\n');
    for (i, r) in log.iter().enumerate() {
        out.push_str(&r.csv_row());
        if let Some(w) = wall_time {
            out.push_str(&format!(",{:.3}", w[i]));
        }
        out.push('\n');
    }
    out
}

/// Downstream tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Image-to-text retrieval.
    Itr,
    /// Text-to-image retrieval.
    Tir,
    /// Image retrieval with text feedback.
    Irtf,
    /// Category recognition.
    Cr,
    /// Subcategory recognition.
    Sr,
    /// Image captioning.
    Ic,
    /// Relative image captioning.
    Ric,
}

impl Task {
    pub const ALL: [Task; 7] = [Task::Itr, Task::Tir, Task::Irtf, Task::Cr, Task::Sr, Task::Ic, Task::Ric];

    pub fn name(self) -> &'static str {
        match self {
            Task::Itr => "itr",
            Task::Tir => "tir",
            Task::Irtf => "irtf",
            Task::Cr => "cr",
            Task::Sr => "sr",
            Task::Ic => "ic",
            Task::Ric => "ric",
        }
    }

    /// Name of the loss fine-tuning optimises.
    pub fn loss(self) -> &'static str {
        match self {
            Task::Itr | Task::Tir => "cmc",
            Task::Irtf => "hmc",
            Task::Cr | Task::Sr => "cross_entropy",
            Task::Ic => "iclm",
            Task::Ric => "rclm",
        }
    }

    /// Parameter prefix of the classification head, for CR and SR.
    pub fn head(self) -> Option<String> {
        matches!(self, Task::Cr | Task::Sr).then(|| format!("cls.{}", self.name()))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task {s:?}; expected one of itr, tir, irtf, cr, sr, ic, ric"))
    }
}

/// Training examples for one task.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskData {
    Pairs {
        ids: Vec<u64>,
        captions: Vec<Vec<u32>>,
    },
    Triplets {
        references: Vec<u64>,
        targets: Vec<u64>,
        captions: Vec<Vec<u32>>,
    },
    Labeled {
        ids: Vec<u64>,
        captions: Vec<Vec<u32>>,
        labels: Vec<usize>,
        classes: usize,
    },
}

impl TaskData {
    fn len(&self) -> usize {
        match self {
            TaskData::Pairs { ids, .. } | TaskData::Labeled { ids, .. } => ids.len(),
            TaskData::Triplets { references, .. } => references.len(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            TaskData::Pairs { .. } => "pairs",
            TaskData::Triplets { .. } => "triplets",
            TaskData::Labeled { .. } => "labeled items",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub lm_normalization: LmNormalization,
    pub log_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 500,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            lm_normalization: LmNormalization::default(),
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: u64,
    pub task: Task,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub optimizer: AdamState<f32>,
    pub log: Vec<FinetuneRecord>,
}

/// Adds a zero-bias linear head `prefix.{w,b}` of `classes` outputs if the
/// model lacks one; an existing head must have that many outputs.
pub fn ensure_head(model: &mut FadVlpModel<f32>, prefix: &str, classes: usize, seed: u64) -> Result<(), TrainError> {
    let d = model.config().width;
    let w_name = format!("{prefix}.w");
    if let Some(w) = model.get(&w_name) {
        if w.shape() != [d, classes] {
            return Err(TrainError::Data(format!(
                "{w_name} has shape {:?}, task needs [{d}, {classes}]",
                w.shape()
            )));
        }
        return Ok(());
    }
    let bound = (6.0 / (d + classes) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(&[d, classes], |_| rng.gen_range(-bound..bound) as f32);
    model.insert(&w_name, w)?;
    model.insert(&format!("{prefix}.b"), Tensor::zeros(&[classes]))?;
    Ok(())
}

/// Optimises the task's loss on `data` starting from `model`'s weights
/// with a fresh optimizer.
pub fn finetune(
    model: &mut FadVlpModel<f32>,
    images: &ImageStore,
    task: Task,
    data: &TaskData,
    cfg: &FinetuneConfig,
    mut progress: impl FnMut(&FinetuneRecord),
) -> Result<FinetuneOutcome, TrainError> {
    let expected = match task {
        Task::Itr | Task::Tir | Task::Ic => "pairs",
        Task::Irtf | Task::Ric => "triplets",
        Task::Cr | Task::Sr => "labeled items",
    };
    if data.kind() != expected {
        return Err(TrainError::Data(format!("task {task} trains on {expected}, got {}", data.kind())));
    }
    let b = cfg.batch_size;
    if b < 2 {
        return Err(TrainError::Config("batch_size must be at least 2".into()));
    }
    if data.len() < b {
        return Err(TrainError::Data(format!("{} examples for batch size {b}", data.len())));
    }
    if let (Some(prefix), TaskData::Labeled { classes, labels, .. }) = (task.head(), data) {
        if let Some(l) = labels.iter().find(|&&l| l >= *classes) {
            return Err(TrainError::Data(format!("label {l} outside {classes} classes")));
        }
        ensure_head(model, &prefix, *classes, cfg.seed)?;
    }
    let max_len = model.config().max_len;
    let mut adam = new_adam(model, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = EpochSampler::new(data.len());
    let mut log = Vec::with_capacity(cfg.steps);
    let norm = cfg.lm_normalization;
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(b, &mut rng);
        let pick = |xs: &[Vec<u32>]| -> Vec<Vec<u32>> { idx.iter().map(|&i| xs[i].clone()).collect() };
        let pick_ids = |xs: &[u64]| -> Vec<u64> { idx.iter().map(|&i| xs[i]).collect() };
        let dropout_seed = cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let (loss, _) = match data {
            TaskData::Pairs { ids, captions } => {
                let ids = pick_ids(ids);
                let batch = PairBatch {
                    images: images.batch(&ids).map_err(TrainError::Data)?,
                    captions: TextBatch::captions(pick(captions), max_len)?,
                    ids,
                };
                optimise(model, &mut adam, dropout_seed, |s| {
                    let l = if task == Task::Ic {
                        iclm_loss(s, &batch, norm)?
                    } else {
                        cmc_loss(s, &batch)?
                    };
                    Ok((l, vec![]))
                })?
            }
            TaskData::Triplets {
                references,
                targets,
                captions,
            } => {
                let reference_ids = pick_ids(references);
                let target_ids = pick_ids(targets);
                let batch = TripletBatch {
                    references: images.batch(&reference_ids).map_err(TrainError::Data)?,
                    targets: images.batch(&target_ids).map_err(TrainError::Data)?,
                    captions: TextBatch::captions(pick(captions), max_len)?,
                    reference_ids,
                    target_ids,
                };
                optimise(model, &mut adam, dropout_seed, |s| {
                    let l = if task == Task::Ric {
                        rclm_loss(s, &batch, norm)?
                    } else {
                        hmc_loss(s, &batch)?
                    };
                    Ok((l, vec![]))
                })?
            }
            TaskData::Labeled {
                ids, captions, labels, ..
            } => {
                let ids = pick_ids(ids);
                let imgs = images.batch(&ids).map_err(TrainError::Data)?;
                let text = TextBatch::captions(pick(captions), max_len)?;
                let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let name = task.name();
                optimise(model, &mut adam, dropout_seed, |s| {
                    let enc = s.encode_images(&imgs)?;
                    let logits = s.classify(name, &enc, &text)?;
                    let l = s.tape.cross_entropy(logits, &targets, None, Reduction::Mean)?;
                    Ok((l, vec![]))
                })?
            }
        };
        let record = FinetuneRecord {
            step: step as u64 + 1,
            task,
            loss,
        };
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            progress(&record);
        }
        log.push(record);
    }
    Ok(FinetuneOutcome { optimizer: adam, log })
}
