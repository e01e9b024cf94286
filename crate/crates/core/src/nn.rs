//! Attention and transformer-layer blocks shared by the text decoder and the
//! multimodal decoder.
//!
//! Blocks hold tape handles ([`Var`]) rather than storage: the model binds
//! its stored parameters onto a fresh tape for every forward pass and builds
//! these structs from the resulting handles. All activations are batched as
//! `[B, L, D]`.

use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

/// Additive mask value for disallowed attention edges. Large and finite so
/// that the forward pass stays free of infinities.
pub const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    /// Applies the map to the last dimension of `x` (any rank ≥ 2).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        let shape = tape.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| crate::tensor::shape_err("linear", "rank-0 input"))?;
        let rows = tape.value(x).numel() / width;
        let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, width])? };
        let mut y = tape.matmul(flat, self.weight)?;
        if let Some(b) = self.bias {
            y = tape.add(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = tape.shape(y)[1];
        tape.reshape(y, &out_shape)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNormParams {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, self.gain, self.bias, T::lit(1e-5))
    }
}

/// Query/key/value/output projections of one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// A second cross-attention whose contribution is scaled by `tanh(gate)`.
/// With the gate at zero the block is an exact identity.
#[derive(Debug, Clone, Copy)]
pub struct GatedCrossAttentionParams {
    pub attention: AttentionParams,
    /// Scalar, shape `[1]`.
    pub gate: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, h)
    }
}

/// One decoder layer. `cross` is present for multimodal-decoder layers and
/// `gated` additionally for layers that can take a second image.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerParams {
    pub self_attention: AttentionParams,
    pub self_norm: LayerNormParams,
    pub cross: Option<(AttentionParams, LayerNormParams)>,
    pub gated: Option<GatedCrossAttentionParams>,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNormParams,
}

fn dims3<T: Scalar>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    match *tape.shape(x) {
        [b, l, d] => Ok((b, l, d)),
        ref s => Err(crate::tensor::shape_err(op, format!("expected [B, L, D], got {s:?}"))),
    }
}

/// Multi-head scaled dot-product attention of `queries` over `keys_values`
/// with an optional additive mask of shape `[B·heads, L, M]`.
fn multi_head<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    keys_values: Var,
    params: &AttentionParams,
    mask: Option<Var>,
) -> Result<Var, TensorError> {
    let (b, l, d) = dims3(tape, queries, "attention")?;
    let (bk, m, dk) = dims3(tape, keys_values, "attention")?;
    let h = params.heads;
    if bk != b || dk != d || h == 0 || d % h != 0 {
        return Err(crate::tensor::shape_err(
            "attention",
            format!("queries [{b}, {l}, {d}], context [{bk}, {m}, {dk}], {h} heads"),
        ));
    }
    let dh = d / h;
    let q = params.query.forward(tape, queries)?;
    let q = tape.reshape(q, &[b, l, h, dh])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let q = tape.reshape(q, &[b * h, l, dh])?;
    let k = params.key.forward(tape, keys_values)?;
    let k = tape.reshape(k, &[b, m, h, dh])?;
    let k = tape.permute(k, &[0, 2, 3, 1])?;
    let k = tape.reshape(k, &[b * h, dh, m])?;
    let v = params.value.forward(tape, keys_values)?;
    let v = tape.reshape(v, &[b, m, h, dh])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;
    let v = tape.reshape(v, &[b * h, m, dh])?;

    let scores = tape.bmm(q, k)?;
    let mut scores = tape.scale(scores, T::one() / T::from_usize(dh).unwrap().sqrt())?;
    if let Some(mask) = mask {
        scores = tape.add(scores, mask)?;
    }
    let weights = tape.softmax(scores, 2)?;
    let mixed = tape.bmm(weights, v)?;
    let mixed = tape.reshape(mixed, &[b, h, l, dh])?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = tape.reshape(mixed, &[b, l, d])?;
    params.output.forward(tape, mixed)
}

/// Builds the `[B·heads, L, L]` additive mask for causal self-attention.
/// `key_valid[b * L + j]` is false for padding positions.
pub fn causal_mask<T: Scalar>(batch: usize, len: usize, heads: usize, key_valid: &[bool]) -> Tensor<T> {
    let masked = T::lit(MASKED);
    let mut data = vec![T::zero(); batch * heads * len * len];
    for b in 0..batch {
        for hd in 0..heads {
            let base = (b * heads + hd) * len * len;
            for i in 0..len {
                for j in 0..len {
                    if j > i || !key_valid[b * len + j] {
                        data[base + i * len + j] = masked;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![batch * heads, len, len], data).expect("mask shape")
}

/// Causal self-attention over `x: [B, L, D]`; position `i` sees positions
/// `≤ i` that are not padding. `pad_mask` is the constant produced by
/// [`causal_mask`]. The residual is added by the caller.
pub fn causal_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &AttentionParams,
    pad_mask: Var,
) -> Result<Var, TensorError> {
    multi_head(tape, x, x, params, Some(pad_mask))
}

/// Queries from `x: [B, L, D]`, keys and values from `context: [B, M, D]`.
/// Context tokens carry no positional signal, so the result is invariant
/// to permutations of the context rows.
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    context: Var,
    params: &AttentionParams,
    ctx_mask: Option<Var>,
) -> Result<Var, TensorError> {
    multi_head(tape, x, context, params, ctx_mask)
}

/// `x + tanh(gate) · CrossAttn(x, context)`.
pub fn gated_cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    context: Var,
    params: &GatedCrossAttentionParams,
) -> Result<Var, TensorError> {
    let attended = cross_attention(tape, x, context, &params.attention, None)?;
    let gate = tape.tanh(params.gate)?;
    let scaled = tape.mul(attended, gate)?;
    tape.add(x, scaled)
}

/// Post-norm decoder layer: self-attention, optional cross-attention on
/// `image_ctx`, optional gated cross-attention on `image_ctx2`, then the
/// feed-forward block.
pub fn decoder_layer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    image_ctx: Option<Var>,
    image_ctx2: Option<Var>,
    params: &DecoderLayerParams,
    pad_mask: Var,
) -> Result<Var, TensorError> {
    if image_ctx2.is_some() && image_ctx.is_none() {
        return Err(TensorError::Invalid {
            op: "decoder_layer",
            detail: "second image context given without the first".into(),
        });
    }
    let attended = causal_self_attention(tape, x, &params.self_attention, pad_mask)?;
    let mut h = tape.add(x, attended)?;
    h = params.self_norm.forward(tape, h)?;
    if let Some(ctx) = image_ctx {
        let (cross, norm) = params.cross.as_ref().ok_or_else(|| TensorError::Invalid {
            op: "decoder_layer",
            detail: "image context given to a layer without cross-attention".into(),
        })?;
        let attended = cross_attention(tape, h, ctx, cross, None)?;
        h = tape.add(h, attended)?;
        h = norm.forward(tape, h)?;
    }
    if let Some(ctx2) = image_ctx2 {
        let gated = params.gated.as_ref().ok_or_else(|| TensorError::Invalid {
            op: "decoder_layer",
            detail: "second image context given to a layer without a gated block".into(),
        })?;
        h = gated_cross_attention(tape, h, ctx2, gated)?;
    }
    let ff = params.ffn.forward(tape, h)?;
    let h = tape.add(h, ff)?;
    params.ffn_norm.forward(tape, h)
}
