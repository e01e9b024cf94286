use serde::{Deserialize, Serialize};

use crate::tensor::TensorError;

/// Architecture hyperparameters.
///
/// The defaults are the desk-scale configuration: a 32×32 RGB input,
/// four stride-2 conv stages, `D = 64`, two text-decoder and two
/// multimodal-decoder layers, four heads and a 32-dimensional joint space.
/// The full-scale model this mirrors uses a ResNet-50 image tower, six plus
/// six BERT-sized decoder layers and `J = 2048`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub conv_widths: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub vocab_size: usize,
    /// Model width `D`.
    pub width: usize,
    pub text_layers: usize,
    pub mm_layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Joint embedding dimension `J`.
    pub joint_dim: usize,
    /// Longest text, counted from `[BOS]` through `[EOS]`.
    pub max_len: usize,
    /// Dropout on the summed token and position embeddings.
    pub dropout: f64,
    /// Divides both similarity functions.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            channels: 3,
            conv_widths: vec![16, 32, 64, 64],
            conv_strides: vec![2, 2, 2, 2],
            vocab_size: 220,
            width: 64,
            text_layers: 2,
            mm_layers: 2,
            heads: 4,
            ffn_width: 128,
            joint_dim: 32,
            max_len: 24,
            dropout: 0.0,
            temperature: 1.0,
        }
    }
}

pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;

impl ModelConfig {
    /// Spatial side length after each conv stage.
    pub fn stage_sides(&self) -> Vec<usize> {
        let mut side = self.image_size;
        self.conv_strides
            .iter()
            .map(|&s| {
                side = (side + 2 * PADDING).saturating_sub(KERNEL) / s.max(1) + 1;
                side
            })
            .collect()
    }

    /// Image tokens: every cell of the last two stages.
    pub fn image_tokens(&self) -> usize {
        let sides = self.stage_sides();
        sides[sides.len() - 2..].iter().map(|s| s * s).sum()
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |detail: String| Err(TensorError::Invalid { op: "model_config", detail });
        if self.conv_widths.len() < 2 || self.conv_widths.len() != self.conv_strides.len() {
            return bad("need at least two conv stages, with one stride per stage".into());
        }
        if self.conv_widths.iter().chain(&self.conv_strides).any(|&x| x == 0) {
            return bad("conv widths and strides must be positive".into());
        }
        if self.image_size == 0 || self.channels == 0 {
            return bad("image size and channel count must be positive".into());
        }
        if *self.conv_widths.last().unwrap() != self.width {
            return bad(format!(
                "last conv width {} must equal model width {}",
                self.conv_widths.last().unwrap(),
                self.width
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.joint_dim == 0 || self.joint_dim > self.width {
            return bad(format!("joint dim {} must be in 1..={}", self.joint_dim, self.width));
        }
        if self.vocab_size < super::vocab::SPECIALS.len() {
            return bad(format!("vocab of {} cannot hold the special tokens", self.vocab_size));
        }
        if self.max_len < 2 {
            return bad("max_len must fit [BOS] and [EOS]".into());
        }
        if self.mm_layers == 0 || self.ffn_width == 0 {
            return bad("need at least one multimodal layer and a positive ffn width".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }
}
