//! Instrumented CLIP vision-encoder forward pass.
//!
//! Layers are numbered from 1 (layer `l` maps `X^{l-1}` to `X^l`); layer 0 is
//! the token embedding. Heads are also numbered from 1. Row 0 of every token
//! matrix is `[CLS]`; rows `1..=h·w` are patches in row-major grid order.

mod pipeline;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize_bicubic, Image};
use crate::tensor::{gelu, layer_norm, linear, matmul, quick_gelu, row_softmax, Tensor};
use crate::weights::{Activation, LayerWeights, VitConfig, VitWeights};

pub use pipeline::{forward, plain_forward, ForwardOutput, LayerTap, TapRequest};

/// `[CLS]` plus an `h×w` grid of patch tokens at some depth.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `(1 + h·w) × D`, `[CLS]` first.
    pub tokens: Tensor,
    /// `(h, w)`
    pub grid: (usize, usize),
    /// Number of encoder layers applied so far.
    pub layer: usize,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, grid: (usize, usize), layer: usize) -> Result<Self> {
        let (n, _) = tokens.dims2()?;
        if n != 1 + grid.0 * grid.1 {
            return Err(Error::shape(
                "token_sequence",
                format!("{n} rows for a {}x{} grid plus [CLS]", grid.0, grid.1),
            ));
        }
        tokens.ensure_finite("token_sequence")?;
        Ok(Self { tokens, grid, layer })
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn cls(&self) -> &[f32] {
        self.tokens.row(0)
    }

    /// Patch `i` in row-major grid order.
    pub fn patch(&self, i: usize) -> &[f32] {
        self.tokens.row(1 + i)
    }

    /// Copy of the `h·w × D` patch block.
    pub fn patches(&self) -> Tensor {
        drop_cls(&self.tokens).expect("sequence has at least one patch")
    }

    /// Replaces the patch block, keeping `[CLS]`.
    pub fn with_patches(&self, patches: &Tensor) -> Result<TokenSequence> {
        if patches.shape() != [self.num_patches(), self.width()] {
            return Err(Error::shape(
                "with_patches",
                format!("{:?} for {} patches of width {}", patches.shape(), self.num_patches(), self.width()),
            ));
        }
        let mut tokens = self.tokens.clone();
        let d = self.width();
        tokens.data_mut()[d..].copy_from_slice(patches.data());
        TokenSequence::new(tokens, self.grid, self.layer)
    }
}

/// Drops row 0 (`[CLS]`) from a token matrix.
pub fn drop_cls(tokens: &Tensor) -> Result<Tensor> {
    let (n, _) = tokens.dims2()?;
    tokens.slice_rows(1, n)
}

/// 1-based `(layer, head)` pair, serialised as `[layer, head]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl From<(usize, usize)> for HeadId {
    fn from((layer, head): (usize, usize)) -> Self {
        Self { layer, head }
    }
}

impl From<HeadId> for (usize, usize) {
    fn from(h: HeadId) -> Self {
        (h.layer, h.head)
    }
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.layer, self.head)
    }
}

/// Output of one attention head routed through its slice of `W_o`: `A_h V_h W_o`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadFeature {
    pub id: HeadId,
    /// `(1 + h·w) × D`, output bias excluded.
    pub features: Tensor,
}

/// Per-layer constants the layer kernels need besides the weights.
#[derive(Clone, Copy, Debug)]
pub struct LayerCtx {
    pub heads: usize,
    pub ln_eps: f32,
    pub activation: Activation,
}

impl From<&VitConfig> for LayerCtx {
    fn from(c: &VitConfig) -> Self {
        Self {
            heads: c.heads,
            ln_eps: c.ln_eps,
            activation: c.activation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerMode {
    Standard,
    /// Residual path scaled by `1 + α`, MSA and FFN branches by `1 − α`.
    Ssr { alpha: f32 },
}

/// Replacement rule for the final encoder layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalVariant {
    #[default]
    Vanilla,
    /// Value path only: `LN(x)·W_v·W_o`, no attention mixing, residual or FFN.
    IdentityNoFfnNoResidual,
    /// `softmax(QQᵀ) + softmax(KKᵀ)` attention, no residual or FFN.
    SclipQqkk,
    /// Standard `QKᵀ` attention, no residual or FFN.
    Clearclip,
}

impl std::str::FromStr for FinalVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "identity_no_ffn_no_residual" | "identity" => Ok(Self::IdentityNoFfnNoResidual),
            "sclip_qqkk" | "sclip" => Ok(Self::SclipQqkk),
            "clearclip" => Ok(Self::Clearclip),
            other => Err(Error::Config(format!("unknown final-layer variant `{other}`"))),
        }
    }
}

/// Result of [`msa_forward`].
#[derive(Clone, Debug)]
pub struct MsaOutput {
    /// `Σ_h A_h V_h W_o + b_o`
    pub output: Tensor,
    pub heads: Vec<HeadFeature>,
    /// Per-head attention matrices, when requested.
    pub attention: Option<Vec<Tensor>>,
}

/// Patch embedding, `[CLS]`, positional embedding and the optional pre-norm.
///
/// `image` is expected to be normalised already.
pub fn tokenize(image: &Image, weights: &VitWeights) -> Result<TokenSequence> {
    let cfg = &weights.config;
    let p = cfg.patch_size;
    let (hh, ww) = (image.height(), image.width());
    if hh % p != 0 || ww % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {hh}x{ww} is not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (hh / p, ww / p);
    let mut patches = Vec::with_capacity(gh * gw * 3 * p * p);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        patches.push(image.at(py * p + y, px * p + x, c));
                    }
                }
            }
        }
    }
    let patches = Tensor::new(vec![gh * gw, 3 * p * p], patches)?;
    let embedded = linear(&patches, &weights.patch_weight.transpose()?, weights.patch_bias.as_ref())?;

    let d = cfg.width;
    let mut tokens = Vec::with_capacity((1 + gh * gw) * d);
    tokens.extend_from_slice(weights.class_embedding.data());
    tokens.extend_from_slice(embedded.data());
    let tokens = Tensor::new(vec![1 + gh * gw, d], tokens)?;
    let pos = positional_embedding(weights, (gh, gw))?;
    let mut tokens = tokens.add(&pos)?;
    if let Some(n) = &weights.ln_pre {
        tokens = layer_norm(&tokens, &n.gain, &n.bias, cfg.ln_eps)?;
    }
    TokenSequence::new(tokens, (gh, gw), 0)
}

/// Normalises a unit-range image with the model's pixel statistics, then tokenizes it.
pub fn embed_image(image: &Image, weights: &VitWeights) -> Result<TokenSequence> {
    let c = &weights.config;
    tokenize(&image.normalized(c.pixel_mean, c.pixel_std), weights)
}

/// Positional embeddings for an `h×w` grid; the patch part is bicubically
/// resampled when the grid differs from the native one, `[CLS]` is kept as is.
pub fn positional_embedding(weights: &VitWeights, grid: (usize, usize)) -> Result<Tensor> {
    let g = weights.config.grid_side();
    let pos = &weights.positional_embedding;
    if grid == (g, g) {
        return Ok(pos.clone());
    }
    let d = pos.cols();
    let resized = resize_bicubic(&pos.data()[d..], g, g, d, grid.0, grid.1);
    let mut data = Vec::with_capacity((1 + grid.0 * grid.1) * d);
    data.extend_from_slice(pos.row(0));
    data.extend_from_slice(&resized);
    Tensor::new(vec![1 + grid.0 * grid.1, d], data)
}

struct Qkv {
    q: Tensor,
    k: Tensor,
    v: Tensor,
}

fn qkv(normed: &Tensor, lw: &LayerWeights) -> Result<Qkv> {
    Ok(Qkv {
        q: linear(normed, &lw.q.weight, Some(&lw.q.bias))?,
        k: linear(normed, &lw.k.weight, Some(&lw.k.bias))?,
        v: linear(normed, &lw.v.weight, Some(&lw.v.bias))?,
    })
}

fn head_slices(t: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let dh = t.cols() / heads;
    (0..heads).map(|h| t.slice_cols(h * dh, (h + 1) * dh)).collect()
}

/// `softmax(a·bᵀ / sqrt(d_h))` for one head.
fn scaled_attention(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let scale = 1.0 / (a.cols() as f32).sqrt();
    row_softmax(&matmul(a, &b.transpose()?)?.scale(scale))
}

/// Per-head `A_h·V_h`, concatenated back to `n × D`, then `·W_o + b_o`.
fn value_path(attention: &[Tensor], v: &Tensor, lw: &LayerWeights) -> Result<Tensor> {
    let heads = attention.len();
    let (n, d) = v.dims2()?;
    let dh = d / heads;
    let vs = head_slices(v, heads)?;
    let mut concat = vec![0.0f32; n * d];
    for (h, (a, vh)) in attention.iter().zip(&vs).enumerate() {
        let ctx = matmul(a, vh)?;
        for (i, row) in ctx.row_iter().enumerate() {
            concat[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(row);
        }
    }
    linear(&Tensor::new(vec![n, d], concat)?, &lw.o.weight, Some(&lw.o.bias))
}

fn check_heads(capture: &BTreeSet<usize>, heads: usize) -> Result<()> {
    match capture.iter().find(|&&h| h == 0 || h > heads) {
        Some(h) => Err(Error::InvalidArgument(format!("head {h} outside 1..={heads}"))),
        None => Ok(()),
    }
}

/// `MSA(LN(X))` for the layer that consumes `x`, capturing the requested
/// (1-based) heads' decomposed outputs and optionally the attention maps.
pub fn msa_forward(
    x: &TokenSequence,
    lw: &LayerWeights,
    ctx: &LayerCtx,
    capture_heads: &BTreeSet<usize>,
    keep_attention: bool,
) -> Result<MsaOutput> {
    check_heads(capture_heads, ctx.heads)?;
    let normed = layer_norm(&x.tokens, &lw.ln_1.gain, &lw.ln_1.bias, ctx.ln_eps)?;
    let Qkv { q, k, v } = qkv(&normed, lw)?;
    let qs = head_slices(&q, ctx.heads)?;
    let ks = head_slices(&k, ctx.heads)?;
    let attention = qs
        .iter()
        .zip(&ks)
        .map(|(qh, kh)| scaled_attention(qh, kh))
        .collect::<Result<Vec<_>>>()?;
    let output = value_path(&attention, &v, lw)?;

    let dh = v.cols() / ctx.heads;
    let layer = x.layer + 1;
    let mut heads = Vec::with_capacity(capture_heads.len());
    for &h in capture_heads {
        let i = h - 1;
        let vh = v.slice_cols(i * dh, (i + 1) * dh)?;
        let wo = lw.o.weight.slice_rows(i * dh, (i + 1) * dh)?;
        let features = matmul(&matmul(&attention[i], &vh)?, &wo)?;
        heads.push(HeadFeature {
            id: HeadId::new(layer, h),
            features,
        });
    }
    Ok(MsaOutput {
        output,
        heads,
        attention: keep_attention.then_some(attention),
    })
}

fn ffn(x: &Tensor, lw: &LayerWeights, ctx: &LayerCtx) -> Result<Tensor> {
    let normed = layer_norm(x, &lw.ln_2.gain, &lw.ln_2.bias, ctx.ln_eps)?;
    let hidden = linear(&normed, &lw.fc.weight, Some(&lw.fc.bias))?;
    let hidden = match ctx.activation {
        Activation::Gelu => gelu(&hidden)?,
        Activation::QuickGelu => quick_gelu(&hidden)?,
    };
    linear(&hidden, &lw.proj.weight, Some(&lw.proj.bias))
}

/// One encoder layer, also returning the MSA details for instrumentation.
pub fn layer_forward_captured(
    x: &TokenSequence,
    lw: &LayerWeights,
    ctx: &LayerCtx,
    mode: LayerMode,
    capture_heads: &BTreeSet<usize>,
    keep_attention: bool,
) -> Result<(TokenSequence, MsaOutput)> {
    let msa = msa_forward(x, lw, ctx, capture_heads, keep_attention)?;
    let out = match mode {
        LayerMode::Standard => {
            let mid = x.tokens.add(&msa.output)?;
            let f = ffn(&mid, lw, ctx)?;
            mid.add(&f)?
        }
        LayerMode::Ssr { alpha } => {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::InvalidArgument(format!("SSR alpha {alpha} outside [0, 1]")));
            }
            let mid = x.tokens.axpby(1.0 + alpha, &msa.output, 1.0 - alpha)?;
            let f = ffn(&mid, lw, ctx)?;
            mid.axpby(1.0 + alpha, &f, 1.0 - alpha)?
        }
    };
    Ok((TokenSequence::new(out, x.grid, x.layer + 1)?, msa))
}

/// `X̂ = X + MSA(LN X)`, `X' = X̂ + FFN(LN X̂)`, or the reweighted form in SSR mode.
pub fn layer_forward(x: &TokenSequence, lw: &LayerWeights, ctx: &LayerCtx, mode: LayerMode) -> Result<TokenSequence> {
    Ok(layer_forward_captured(x, lw, ctx, mode, &BTreeSet::new(), false)?.0)
}

/// Per-head attention used by a final-layer variant, or `None` when the
/// variant has no token mixing.
pub fn variant_attention(
    x: &TokenSequence,
    lw: &LayerWeights,
    ctx: &LayerCtx,
    variant: FinalVariant,
) -> Result<Option<Vec<Tensor>>> {
    let normed = layer_norm(&x.tokens, &lw.ln_1.gain, &lw.ln_1.bias, ctx.ln_eps)?;
    let Qkv { q, k, .. } = qkv(&normed, lw)?;
    let qs = head_slices(&q, ctx.heads)?;
    let ks = head_slices(&k, ctx.heads)?;
    let maps = match variant {
        FinalVariant::IdentityNoFfnNoResidual => return Ok(None),
        FinalVariant::Vanilla | FinalVariant::Clearclip => qs
            .iter()
            .zip(&ks)
            .map(|(qh, kh)| scaled_attention(qh, kh))
            .collect::<Result<Vec<_>>>()?,
        FinalVariant::SclipQqkk => qs
            .iter()
            .zip(&ks)
            .map(|(qh, kh)| scaled_attention(qh, qh)?.add(&scaled_attention(kh, kh)?))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(Some(maps))
}

/// Patch features (`h·w × D`, `[CLS]` dropped) produced by the final layer
/// under the chosen variant.
pub fn final_layer_features(
    x: &TokenSequence,
    lw: &LayerWeights,
    ctx: &LayerCtx,
    variant: FinalVariant,
) -> Result<Tensor> {
    let out = match variant {
        FinalVariant::Vanilla => layer_forward(x, lw, ctx, LayerMode::Standard)?.tokens,
        FinalVariant::IdentityNoFfnNoResidual => {
            let normed = layer_norm(&x.tokens, &lw.ln_1.gain, &lw.ln_1.bias, ctx.ln_eps)?;
            let v = linear(&normed, &lw.v.weight, Some(&lw.v.bias))?;
            linear(&v, &lw.o.weight, Some(&lw.o.bias))?
        }
        FinalVariant::SclipQqkk | FinalVariant::Clearclip => {
            let normed = layer_norm(&x.tokens, &lw.ln_1.gain, &lw.ln_1.bias, ctx.ln_eps)?;
            let v = linear(&normed, &lw.v.weight, Some(&lw.v.bias))?;
            let maps = variant_attention(x, lw, ctx, variant)?.expect("variant mixes tokens");
            value_path(&maps, &v, lw)?
        }
    };
    drop_cls(&out)
}

/// Final layer norm followed by the visual projection.
pub fn project(features: &Tensor, weights: &VitWeights) -> Result<Tensor> {
    let n = &weights.ln_post;
    let normed = layer_norm(features, &n.gain, &n.bias, weights.config.ln_eps)?;
    matmul(&normed, &weights.proj)
}

/// Runs layers `x.layer + 1 ..= upto` in standard mode.
pub fn run_layers(x: &TokenSequence, weights: &VitWeights, upto: usize) -> Result<TokenSequence> {
    let ctx = LayerCtx::from(&weights.config);
    let mut cur = x.clone();
    for l in x.layer + 1..=upto {
        cur = layer_forward(&cur, weights.layer(l)?, &ctx, LayerMode::Standard)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests;
