//! The four pre-training losses and their per-stage sum.
//!
//! * CMC: image→text plus text→image InfoNCE over the in-batch similarity
//!   matrix `κ`.
//! * ICLM: caption negative log-likelihood under the captioner.
//! * HMC: fused (reference, relative caption) → target InfoNCE over `κ′`,
//!   one direction only.
//! * RCLM: relative-caption negative log-likelihood under the relative
//!   captioner.
//!
//! The language-model losses sum token NLL within a caption and average
//! over the batch.
//!
//! ```
//! use fadvlp::objectives::info_nce;
//! use fadvlp::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let k = tape.constant(Tensor::zeros(&[3, 3]));
//! let l = info_nce(&mut tape, k).unwrap();
//! assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
//! ```

use serde::{Deserialize, Serialize};

use crate::model::vocab::PAD;
use crate::model::{ImageEncoding, Mode, Session, TextBatch};
use crate::tensor::{Reduction, Scalar, Tape, Tensor, TensorError, Var};

/// `B` images with their captions, aligned by row.
#[derive(Debug, Clone)]
pub struct PairBatch<T: Scalar = f32> {
    pub ids: Vec<u64>,
    /// `[B, H, W, C]`
    pub images: Tensor<T>,
    pub captions: TextBatch,
}

/// `B` (reference, relative caption, target) rows.
#[derive(Debug, Clone)]
pub struct TripletBatch<T: Scalar = f32> {
    pub reference_ids: Vec<u64>,
    pub target_ids: Vec<u64>,
    pub references: Tensor<T>,
    pub captions: TextBatch,
    pub targets: Tensor<T>,
}

impl<T: Scalar> TripletBatch<T> {
    pub fn validate(&self) -> Result<(), TensorError> {
        let b = self.reference_ids.len();
        if self.target_ids.len() != b || self.captions.batch_size() != b {
            return Err(invalid("triplet_batch", "row counts differ"));
        }
        if let Some(i) = (0..b).find(|&i| self.reference_ids[i] == self.target_ids[i]) {
            return Err(invalid("triplet_batch", format!("row {i} uses the same item as reference and target")));
        }
        Ok(())
    }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        detail: detail.into(),
    }
}

fn require_contrastive(b: usize, op: &'static str) -> Result<(), TensorError> {
    if b < 2 {
        return Err(invalid(op, format!("contrastive loss needs B ≥ 2, got {b}")));
    }
    Ok(())
}

/// Mean over rows `j` of `−log softmax(sim[j, ·])[j]`.
pub fn info_nce<T: Scalar>(tape: &mut Tape<T>, sim: Var) -> Result<Var, TensorError> {
    let s = tape.shape(sim).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(crate::tensor::shape_err("info_nce", format!("need a square matrix, got {s:?}")));
    }
    let targets: Vec<usize> = (0..s[0]).collect();
    tape.cross_entropy(sim, &targets, None, Reduction::Mean)
}

/// Bidirectional InfoNCE on an image×text similarity matrix.
pub fn cmc_from_similarity<T: Scalar>(tape: &mut Tape<T>, kappa: Var) -> Result<Var, TensorError> {
    let i2t = info_nce(tape, kappa)?;
    let kt = tape.transpose(kappa)?;
    let t2i = info_nce(tape, kt)?;
    tape.add(i2t, t2i)
}

/// One-directional InfoNCE on a fused×target similarity matrix.
pub fn hmc_from_similarity<T: Scalar>(tape: &mut Tape<T>, kappa_prime: Var) -> Result<Var, TensorError> {
    info_nce(tape, kappa_prime)
}

/// How token NLL is reduced inside the language-model losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmNormalization {
    /// Sum over tokens, mean over the batch.
    #[default]
    SumPerCaption,
    /// Mean over all non-padding tokens.
    PerToken,
}

/// NLL of `text` under `logits` (`[B·(L+1), V]`, mode-token row first).
pub fn lm_loss_from_logits<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    text: &TextBatch,
    norm: LmNormalization,
) -> Result<Var, TensorError> {
    let targets = text.lm_targets();
    match norm {
        LmNormalization::PerToken => tape.cross_entropy(logits, &targets, Some(PAD as usize), Reduction::Mean),
        LmNormalization::SumPerCaption => {
            let total = tape.cross_entropy(logits, &targets, Some(PAD as usize), Reduction::Sum)?;
            tape.scale(total, T::lit(1.0 / text.batch_size() as f64))
        }
    }
}

/// CMC for a pair batch.
pub fn cmc_loss<T: Scalar>(s: &mut Session<T>, batch: &PairBatch<T>) -> Result<Var, TensorError> {
    require_contrastive(batch.captions.batch_size(), "cmc_loss")?;
    let img = s.encode_images(&batch.images)?;
    let text = s.encode_text(&batch.captions, Mode::Align)?;
    let k = s.kappa(img.pooled, text.pooled)?;
    cmc_from_similarity(&mut s.tape, k)
}

/// ICLM for a pair batch.
pub fn iclm_loss<T: Scalar>(s: &mut Session<T>, batch: &PairBatch<T>, norm: LmNormalization) -> Result<Var, TensorError> {
    let img = s.encode_images(&batch.images)?;
    let (_, mm) = s.decode(&batch.captions, Mode::Align, &img, None)?;
    let logits = s.lm_logits(mm)?;
    lm_loss_from_logits(&mut s.tape, logits, &batch.captions, norm)
}

/// HMC for a triplet batch.
pub fn hmc_loss<T: Scalar>(s: &mut Session<T>, batch: &TripletBatch<T>) -> Result<Var, TensorError> {
    batch.validate()?;
    require_contrastive(batch.captions.batch_size(), "hmc_loss")?;
    let r = s.encode_images(&batch.references)?;
    let t = s.encode_images(&batch.targets)?;
    hmc_with(s, &r, &t, &batch.captions)
}

fn hmc_with<T: Scalar>(
    s: &mut Session<T>,
    reference: &ImageEncoding,
    target: &ImageEncoding,
    captions: &TextBatch,
) -> Result<Var, TensorError> {
    let m = s.fuse(reference, captions)?;
    let kp = s.kappa_prime(m, target.pooled)?;
    hmc_from_similarity(&mut s.tape, kp)
}

fn rclm_with<T: Scalar>(
    s: &mut Session<T>,
    reference: &ImageEncoding,
    target: &ImageEncoding,
    captions: &TextBatch,
    norm: LmNormalization,
) -> Result<Var, TensorError> {
    let (_, mm) = s.decode(captions, Mode::RelCap, reference, Some(target))?;
    let logits = s.lm_logits(mm)?;
    lm_loss_from_logits(&mut s.tape, logits, captions, norm)
}

/// RCLM for a triplet batch.
pub fn rclm_loss<T: Scalar>(
    s: &mut Session<T>,
    batch: &TripletBatch<T>,
    norm: LmNormalization,
) -> Result<Var, TensorError> {
    batch.validate()?;
    let r = s.encode_images(&batch.references)?;
    let t = s.encode_images(&batch.targets)?;
    rclm_with(s, &r, &t, &batch.captions, norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cmc: f64,
    pub iclm: f64,
    pub hmc: f64,
    pub rclm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cmc: 1.0,
            iclm: 1.0,
            hmc: 1.0,
            rclm: 1.0,
        }
    }
}

/// Tape handles of the enabled sub-losses and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct StageLoss {
    pub cmc: Var,
    pub iclm: Var,
    pub hmc: Option<Var>,
    pub rclm: Option<Var>,
    pub total: Var,
}

/// Sub-loss values of one step, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: u8,
    pub cmc: f64,
    pub iclm: f64,
    pub hmc: Option<f64>,
    pub rclm: Option<f64>,
    pub total: f64,
}

impl LossRecord {
    pub fn read<T: Scalar>(tape: &Tape<T>, loss: &StageLoss, step: u64, stage: u8) -> Self {
        let v = |x: Var| tape.value(x).item().to_f64().unwrap();
        LossRecord {
            step,
            stage,
            cmc: v(loss.cmc),
            iclm: v(loss.iclm),
            hmc: loss.hmc.map(v),
            rclm: loss.rclm.map(v),
            total: v(loss.total),
        }
    }

    pub const CSV_HEADER: &'static str = "step,stage,cmc,iclm,hmc,rclm,total";

    /// Empty cells for sub-losses the stage does not use.
    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{},{},{:.6}",
            self.step,
            self.stage,
            self.cmc,
            self.iclm,
            opt(self.hmc),
            opt(self.rclm),
            self.total
        )
    }
}

/// Stage 1 is `CMC + ICLM`; stage 2 adds `HMC + RCLM` on triplets whose
/// references are exactly the pair batch's images, so every image is
/// encoded once.
pub fn stage_loss<T: Scalar>(
    s: &mut Session<T>,
    stage: u8,
    pairs: &PairBatch<T>,
    triplets: Option<&TripletBatch<T>>,
    weights: &LossWeights,
    norm: LmNormalization,
) -> Result<StageLoss, TensorError> {
    let triplets = match (stage, triplets) {
        (1, _) => None,
        (2, Some(t)) => Some(t),
        (2, None) => return Err(invalid("stage_loss", "stage 2 needs a triplet batch")),
        _ => return Err(invalid("stage_loss", format!("unknown stage {stage}"))),
    };
    require_contrastive(pairs.captions.batch_size(), "stage_loss")?;
    if let Some(t) = triplets {
        t.validate()?;
        if t.reference_ids != pairs.ids {
            return Err(invalid("stage_loss", "triplet references differ from the pair images"));
        }
    }
    let img = s.encode_images(&pairs.images)?;
    let (text_hidden, mm) = s.decode(&pairs.captions, Mode::Align, &img, None)?;
    let text_pooled = s.pool_eos(text_hidden, &pairs.captions)?;
    let k = s.kappa(img.pooled, text_pooled)?;
    let cmc = cmc_from_similarity(&mut s.tape, k)?;
    let logits = s.lm_logits(mm)?;
    let iclm = lm_loss_from_logits(&mut s.tape, logits, &pairs.captions, norm)?;

    let (hmc, rclm) = match triplets {
        Some(t) => {
            let tgt = s.encode_images(&t.targets)?;
            let hmc = hmc_with(s, &img, &tgt, &t.captions)?;
            let rclm = rclm_with(s, &img, &tgt, &t.captions, norm)?;
            (Some(hmc), Some(rclm))
        }
        None => (None, None),
    };
    let mut total = s.tape.scale(cmc, T::lit(weights.cmc))?;
    let w_iclm = s.tape.scale(iclm, T::lit(weights.iclm))?;
    total = s.tape.add(total, w_iclm)?;
    if let (Some(h), Some(r)) = (hmc, rclm) {
        let wh = s.tape.scale(h, T::lit(weights.hmc))?;
        total = s.tape.add(total, wh)?;
        let wr = s.tape.scale(r, T::lit(weights.rclm))?;
        total = s.tape.add(total, wr)?;
    }
    Ok(StageLoss {
        cmc,
        iclm,
        hmc,
        rclm,
        total,
    })
}
