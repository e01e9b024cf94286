use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{KERNEL, PADDING};
use super::params::FadVlpModel;
use super::vocab::{Mode, BOS, EOS, PAD};
use crate::nn::{
    causal_mask, decoder_layer, AttentionParams, DecoderLayerParams, FeedForward, GatedCrossAttentionParams,
    LayerNormParams, Linear,
};
use crate::tensor::{shape_err, Gradients, Scalar, Tape, Tensor, TensorError, Var};

/// A padded batch of token sequences. Each row starts with `[BOS]`; rows
/// built with [`TextBatch::captions`] also contain an `[EOS]`, and anything
/// after the first `[EOS]` is ignored by pooling and the language-model
/// targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBatch {
    rows: Vec<Vec<u32>>,
    len: usize,
    eos: Vec<Option<usize>>,
}

impl TextBatch {
    /// Complete texts; each must contain `[EOS]` and fit in `max_len`.
    pub fn captions(rows: Vec<Vec<u32>>, max_len: usize) -> Result<Self, TensorError> {
        let batch = TextBatch::build(rows, max_len)?;
        if let Some(i) = batch.eos.iter().position(Option::is_none) {
            return Err(TensorError::Invalid {
                op: "text_batch",
                detail: format!("row {i} has no [EOS]"),
            });
        }
        Ok(batch)
    }

    /// Generation prefixes; `[EOS]` is not required.
    pub fn prefixes(rows: Vec<Vec<u32>>, max_len: usize) -> Result<Self, TensorError> {
        TextBatch::build(rows, max_len)
    }

    fn build(rows: Vec<Vec<u32>>, max_len: usize) -> Result<Self, TensorError> {
        if rows.is_empty() {
            return Err(shape_err("text_batch", "empty batch"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.first() != Some(&BOS) {
                return Err(TensorError::Invalid {
                    op: "text_batch",
                    detail: format!("row {i} does not start with [BOS]"),
                });
            }
            if r.len() > max_len {
                return Err(TensorError::Invalid {
                    op: "text_batch",
                    detail: format!("row {i} has {} tokens, limit {max_len}", r.len()),
                });
            }
        }
        let len = rows.iter().map(Vec::len).max().unwrap();
        let eos = rows.iter().map(|r| r.iter().position(|&t| t == EOS)).collect();
        Ok(TextBatch { rows, len, eos })
    }

    pub fn batch_size(&self) -> usize {
        self.rows.len()
    }

    /// Padded length, not counting the mode token.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    /// Token at padded position `p` (mode token excluded) of row `b`.
    fn token(&self, b: usize, p: usize) -> u32 {
        self.rows[b].get(p).copied().unwrap_or(PAD)
    }

    /// Next-token targets for every decoder position, mode token included:
    /// position `q` predicts the token at `q + 1`. The mode position, the
    /// `[EOS]` position and everything after it carry `PAD`.
    pub fn lm_targets(&self) -> Vec<usize> {
        let steps = self.len + 1;
        let mut out = vec![PAD as usize; self.rows.len() * steps];
        for b in 0..self.rows.len() {
            let stop = self.eos[b].unwrap_or(self.rows[b].len() - 1);
            for p in 0..stop {
                out[b * steps + p + 1] = self.token(b, p + 1) as usize;
            }
        }
        out
    }

    /// Count of non-ignored targets per row.
    pub fn target_count(&self) -> usize {
        self.lm_targets().iter().filter(|&&t| t != PAD as usize).count()
    }
}

/// Image tokens `[B, N_tok, D]` and pooled features `[B, D]`.
#[derive(Debug, Clone, Copy)]
pub struct ImageEncoding {
    pub tokens: Var,
    pub pooled: Var,
}

/// Hidden states `[B, L+1, D]` (mode token first) and the state at each
/// row's `[EOS]`, `[B, D]`.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoding {
    pub hidden: Var,
    pub pooled: Var,
}

/// One forward pass: the model's parameters bound lazily onto a fresh tape.
pub struct Session<'m, T: Scalar = f32> {
    pub tape: Tape<T>,
    model: &'m FadVlpModel<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
    dropout: Option<ChaCha8Rng>,
}

impl<'m, T: Scalar> Session<'m, T> {
    /// Parameters enter the tape as trainable leaves.
    pub fn train(model: &'m FadVlpModel<T>) -> Self {
        Session::with(model, true)
    }

    /// Parameters enter as constants and dropout is off.
    pub fn eval(model: &'m FadVlpModel<T>) -> Self {
        Session::with(model, false)
    }

    fn with(model: &'m FadVlpModel<T>, trainable: bool) -> Self {
        Session {
            tape: Tape::new(),
            model,
            bound: vec![None; model.names().len()],
            trainable,
            dropout: None,
        }
    }

    /// Enables embedding dropout, seeded, when the config rate is positive.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        if self.trainable && self.model.config().dropout > 0.0 {
            self.dropout = Some(ChaCha8Rng::seed_from_u64(seed));
        }
        self
    }

    pub fn model(&self) -> &'m FadVlpModel<T> {
        self.model
    }

    /// The tape handle of a named parameter.
    pub fn param(&mut self, name: &str) -> Result<Var, TensorError> {
        let i = self.model.position(name).ok_or_else(|| TensorError::Invalid {
            op: "param",
            detail: format!("unknown parameter {name}"),
        })?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let value = self.model.tensors()[i].clone();
        let v = if self.trainable {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Forgets parameter bindings made after the tape held `len` nodes, to
    /// pair with [`Tape::truncate`].
    pub fn forget_after(&mut self, len: usize) {
        for b in &mut self.bound {
            if b.is_some_and(|v| v.index() >= len) {
                *b = None;
            }
        }
    }

    /// Gradients in model parameter order; `None` for parameters this
    /// session never touched or that the loss does not reach.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>, TensorError> {
        let grads: Gradients<T> = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v).map(<[T]>::to_vec)))
            .collect())
    }

    fn linear(&mut self, prefix: &str, bias: bool) -> Result<Linear, TensorError> {
        Ok(Linear {
            weight: self.param(&format!("{prefix}.w"))?,
            bias: if bias { Some(self.param(&format!("{prefix}.b"))?) } else { None },
        })
    }

    fn norm(&mut self, prefix: &str) -> Result<LayerNormParams, TensorError> {
        Ok(LayerNormParams {
            gain: self.param(&format!("{prefix}.g"))?,
            bias: self.param(&format!("{prefix}.b"))?,
        })
    }

    fn attention(&mut self, prefix: &str) -> Result<AttentionParams, TensorError> {
        Ok(AttentionParams {
            query: self.linear(&format!("{prefix}.q"), true)?,
            key: self.linear(&format!("{prefix}.k"), true)?,
            value: self.linear(&format!("{prefix}.v"), true)?,
            output: self.linear(&format!("{prefix}.o"), true)?,
            heads: self.model.config().heads,
        })
    }

    fn layer(&mut self, prefix: &str, multimodal: bool, gated: bool) -> Result<DecoderLayerParams, TensorError> {
        let self_attention = self.attention(&format!("{prefix}.self"))?;
        let self_norm = self.norm(&format!("{prefix}.self_norm"))?;
        let cross = if multimodal {
            Some((
                self.attention(&format!("{prefix}.cross"))?,
                self.norm(&format!("{prefix}.cross_norm"))?,
            ))
        } else {
            None
        };
        let gated = if gated {
            Some(GatedCrossAttentionParams {
                attention: self.attention(&format!("{prefix}.gated"))?,
                gate: self.param(&format!("{prefix}.gate"))?,
            })
        } else {
            None
        };
        Ok(DecoderLayerParams {
            self_attention,
            self_norm,
            cross,
            gated,
            ffn: FeedForward {
                up: self.linear(&format!("{prefix}.ffn.up"), true)?,
                down: self.linear(&format!("{prefix}.ffn.down"), true)?,
            },
            ffn_norm: self.norm(&format!("{prefix}.ffn_norm"))?,
        })
    }

    /// Runs the conv encoder on `[B, H, W, C]` images.
    pub fn encode_images(&mut self, images: &Tensor<T>) -> Result<ImageEncoding, TensorError> {
        let x = self.tape.constant(images.clone());
        self.encode_images_var(x)
    }

    /// As [`Self::encode_images`] for images already on the tape.
    pub fn encode_images_var(&mut self, images: Var) -> Result<ImageEncoding, TensorError> {
        let c = self.model.config().clone();
        let s = self.tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != c.image_size || s[2] != c.image_size || s[3] != c.channels {
            return Err(shape_err(
                "encode_images",
                format!(
                    "got {s:?}, expected [B, {0}, {0}, {1}]",
                    c.image_size, c.channels
                ),
            ));
        }
        let b = s[0];
        let sides = c.stage_sides();
        let stages = c.conv_widths.len();
        let mut x = images;
        let mut maps = Vec::with_capacity(stages);
        for st in 0..stages {
            let cols = self.tape.im2col(x, KERNEL, c.conv_strides[st], PADDING)?;
            let conv = self.linear(&format!("enc.conv{st}"), true)?;
            let y = conv.forward(&mut self.tape, cols)?;
            let norm = self.norm(&format!("enc.norm{st}"))?;
            let y = norm.forward(&mut self.tape, y)?;
            let y = self.tape.gelu(y)?;
            x = self.tape.reshape(y, &[b, sides[st], sides[st], c.conv_widths[st]])?;
            maps.push(x);
        }
        let stage_emb = self.param("enc.stage_emb")?;
        let mut parts = Vec::with_capacity(2);
        for (k, (tag, st)) in [("adapt3", stages - 2), ("adapt4", stages - 1)].into_iter().enumerate() {
            let cells = sides[st] * sides[st];
            let flat = self.tape.reshape(maps[st], &[b, cells, c.conv_widths[st]])?;
            let adapt = self.linear(&format!("enc.{tag}"), true)?;
            let t = adapt.forward(&mut self.tape, flat)?;
            let row = self.tape.gather_rows(stage_emb, &[k])?;
            let row = self.tape.reshape(row, &[c.width])?;
            parts.push(self.tape.add(t, row)?);
        }
        let tokens = self.tape.concat(&parts, 1)?;
        let last = stages - 1;
        let cells = sides[last] * sides[last];
        let final_map = self.tape.reshape(maps[last], &[b, cells, c.width])?;
        let pooled = self.tape.mean_axis(final_map, 1)?;
        Ok(ImageEncoding { tokens, pooled })
    }

    fn embed(&mut self, text: &TextBatch, mode: Mode) -> Result<Var, TensorError> {
        let c = self.model.config();
        let (b, steps, d) = (text.batch_size(), text.len() + 1, c.width);
        let vocab = c.vocab_size;
        let mut ids = Vec::with_capacity(b * steps);
        for r in 0..b {
            ids.push(mode.token() as usize);
            for p in 0..text.len() {
                let t = text.token(r, p) as usize;
                if t >= vocab {
                    return Err(TensorError::Invalid {
                        op: "embed",
                        detail: format!("token id {t} outside vocabulary of {vocab}"),
                    });
                }
                ids.push(t);
            }
        }
        let tok = self.param("emb.tok")?;
        let pos = self.param("emb.pos")?;
        let x = self.tape.gather_rows(tok, &ids)?;
        let x = self.tape.reshape(x, &[b, steps, d])?;
        let positions: Vec<usize> = (0..steps).collect();
        let p = self.tape.gather_rows(pos, &positions)?;
        let x = self.tape.add(x, p)?;
        let rate = self.model.config().dropout;
        match self.dropout.as_mut() {
            Some(rng) => {
                let keep = T::lit(1.0 / (1.0 - rate));
                let mask = Tensor::from_fn(&[b, steps, d], |_| {
                    if rng.gen::<f64>() < rate {
                        T::zero()
                    } else {
                        keep
                    }
                });
                let m = self.tape.constant(mask);
                self.tape.mul(x, m)
            }
            None => Ok(x),
        }
    }

    fn pad_mask(&mut self, text: &TextBatch) -> Var {
        let (b, steps) = (text.batch_size(), text.len() + 1);
        let mut valid = Vec::with_capacity(b * steps);
        for r in 0..b {
            valid.push(true);
            valid.extend((0..text.len()).map(|p| text.token(r, p) != PAD));
        }
        let mask = causal_mask(b, steps, self.model.config().heads, &valid);
        self.tape.constant(mask)
    }

    /// Hidden state at each row's `[EOS]` (offset by the mode token).
    pub fn pool_eos(&mut self, hidden: Var, text: &TextBatch) -> Result<Var, TensorError> {
        let (b, steps, d) = (text.batch_size(), text.len() + 1, self.model.config().width);
        let rows = (0..b)
            .map(|r| {
                text.eos[r].map(|e| r * steps + e + 1).ok_or_else(|| TensorError::Invalid {
                    op: "pool_eos",
                    detail: format!("row {r} has no [EOS]"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let flat = self.tape.reshape(hidden, &[b * steps, d])?;
        self.tape.gather_rows(flat, &rows)
    }

    /// Hidden state at the last position of every row.
    fn pool_last(&mut self, hidden: Var, text: &TextBatch) -> Result<Var, TensorError> {
        let (b, steps, d) = (text.batch_size(), text.len() + 1, self.model.config().width);
        let rows: Vec<usize> = (0..b).map(|r| r * steps + text.rows[r].len()).collect();
        let flat = self.tape.reshape(hidden, &[b * steps, d])?;
        self.tape.gather_rows(flat, &rows)
    }

    fn text_hidden(&mut self, text: &TextBatch, mode: Mode) -> Result<(Var, Var), TensorError> {
        let mut x = self.embed(text, mode)?;
        let mask = self.pad_mask(text);
        for l in 0..self.model.config().text_layers {
            let params = self.layer(&format!("text.{l}"), false, false)?;
            x = decoder_layer(&mut self.tape, x, None, None, &params, mask)?;
        }
        Ok((x, mask))
    }

    /// The text decoder alone. Pooling needs every row to contain `[EOS]`.
    pub fn encode_text(&mut self, text: &TextBatch, mode: Mode) -> Result<TextEncoding, TensorError> {
        let (hidden, _) = self.text_hidden(text, mode)?;
        let pooled = self.pool_eos(hidden, text)?;
        Ok(TextEncoding { hidden, pooled })
    }

    fn multimodal(
        &mut self,
        text_hidden: Var,
        mask: Var,
        ctx: Var,
        ctx2: Option<Var>,
    ) -> Result<Var, TensorError> {
        let mut x = text_hidden;
        for l in 0..self.model.config().mm_layers {
            let params = self.layer(&format!("mm.{l}"), true, ctx2.is_some())?;
            x = decoder_layer(&mut self.tape, x, Some(ctx), ctx2, &params, mask)?;
        }
        Ok(x)
    }

    /// Text decoder then multimodal decoder conditioned on `image` (and, for
    /// the relative captioner, `second` through the gated block). Returns
    /// `(text encoding, multimodal hidden [B, L+1, D])`.
    pub fn decode(
        &mut self,
        text: &TextBatch,
        mode: Mode,
        image: &ImageEncoding,
        second: Option<&ImageEncoding>,
    ) -> Result<(Var, Var), TensorError> {
        let (hidden, mask) = self.text_hidden(text, mode)?;
        let mm = self.multimodal(hidden, mask, image.tokens, second.map(|e| e.tokens))?;
        Ok((hidden, mm))
    }

    /// Vocabulary logits `[B·(L+1), V]` for every decoder position.
    pub fn lm_logits(&mut self, hidden: Var) -> Result<Var, TensorError> {
        let s = self.tape.shape(hidden).to_vec();
        let flat = self.tape.reshape(hidden, &[s[0] * s[1], s[2]])?;
        let lm = self.linear("lm", true)?;
        lm.forward(&mut self.tape, flat)
    }

    /// Captioner next-token logits, `[B, L, V]`, one row per prefix
    /// position (the mode-token position is dropped).
    pub fn caption_logits(&mut self, text: &TextBatch, image: &ImageEncoding) -> Result<Var, TensorError> {
        let (_, mm) = self.decode(text, Mode::Align, image, None)?;
        self.prefix_logits(mm, text)
    }

    /// Relative-captioner logits, `[B, L, V]`: first cross-attention on
    /// `reference`, gated cross-attention on `target`.
    pub fn relative_caption_logits(
        &mut self,
        text: &TextBatch,
        reference: &ImageEncoding,
        target: &ImageEncoding,
    ) -> Result<Var, TensorError> {
        let (_, mm) = self.decode(text, Mode::RelCap, reference, Some(target))?;
        self.prefix_logits(mm, text)
    }

    fn prefix_logits(&mut self, mm: Var, text: &TextBatch) -> Result<Var, TensorError> {
        let v = self.model.config().vocab_size;
        let logits = self.lm_logits(mm)?;
        let logits = self.tape.reshape(logits, &[text.batch_size(), text.len() + 1, v])?;
        self.tape.slice(logits, 1, 1, text.len())
    }

    /// Logits `[B, V]` for the token following each row's last prefix
    /// token. Used by generation.
    pub fn next_token_logits(
        &mut self,
        text: &TextBatch,
        mode: Mode,
        image: &ImageEncoding,
        second: Option<&ImageEncoding>,
    ) -> Result<Var, TensorError> {
        let (_, mm) = self.decode(text, mode, image, second)?;
        let last = self.pool_last(mm, text)?;
        let lm = self.linear("lm", true)?;
        lm.forward(&mut self.tape, last)
    }

    /// Fuser: relative caption through the text decoder under `[FUSE]`,
    /// multimodal decoder attending to the reference image, pooled at
    /// `[EOS]`. Returns `m`, `[B, D]`.
    pub fn fuse(&mut self, reference: &ImageEncoding, text: &TextBatch) -> Result<Var, TensorError> {
        let (_, mm) = self.decode(text, Mode::Fuse, reference, None)?;
        self.pool_eos(mm, text)
    }

    /// Projection through a bias-free head followed by l2 normalisation.
    pub fn project(&mut self, head: &str, pooled: Var) -> Result<Var, TensorError> {
        let w = self.param(&format!("head.{head}.w"))?;
        let z = self.tape.matmul(pooled, w)?;
        self.tape.l2_normalize(z, 1, T::lit(1e-12))
    }

    fn similarity(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let bt = self.tape.transpose(b)?;
        let k = self.tape.matmul(a, bt)?;
        let inv_tau = T::lit(1.0 / self.model.config().temperature);
        self.tape.scale(k, inv_tau)
    }

    /// `κ[j, k] = cos(f(i_j), g(t_k)) / τ` for pooled image rows `i` and
    /// pooled text rows `t`.
    pub fn kappa(&mut self, image_pooled: Var, text_pooled: Var) -> Result<Var, TensorError> {
        let f = self.project("f", image_pooled)?;
        let g = self.project("g", text_pooled)?;
        self.similarity(f, g)
    }

    /// `κ′[j, k] = cos(h(m_j), f(i_k)) / τ`, with the same `f` as [`Self::kappa`].
    pub fn kappa_prime(&mut self, fused: Var, target_pooled: Var) -> Result<Var, TensorError> {
        let h = self.project("h", fused)?;
        let f = self.project("f", target_pooled)?;
        self.similarity(h, f)
    }

    /// Classifier logits over the multimodal decoder's `[EOS]` state for
    /// (image, caption) in aligner mode. The head `cls.{task}` must exist.
    pub fn classify(&mut self, task: &str, image: &ImageEncoding, text: &TextBatch) -> Result<Var, TensorError> {
        let (_, mm) = self.decode(text, Mode::Align, image, None)?;
        let pooled = self.pool_eos(mm, text)?;
        let head = self.linear(&format!("cls.{task}"), true)?;
        head.forward(&mut self.tape, pooled)
    }
}
