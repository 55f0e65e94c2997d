//! Multi-head self-attention with a per-sample token mask, the pre-norm
//! transformer layer, and the plain ViT classifier used by the recognizers.

use vidpriv_tensor::{Binder, Element, ParamStore, RngState, Var};

use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_linear, layer_norm, linear, small_uniform};
use crate::tokenizer::{embed_tokens, TubeletLayout};

/// Registers the weights of one transformer layer under `prefix`.
///
/// Names: `ln1`, `qkv` (`D -> 3D`), `proj`, `ln2`, `fc1` (`D -> 4D`), `fc2`.
pub fn init_layer(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut RngState) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    init_linear(store, &format!("{prefix}.qkv"), dim, 3 * dim, rng);
    init_linear(store, &format!("{prefix}.proj"), dim, dim, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_linear(store, &format!("{prefix}.fc1"), dim, 4 * dim, rng);
    init_linear(store, &format!("{prefix}.fc2"), 4 * dim, dim, rng);
}

/// Attention weights `[B, heads, S, S]` and values `[B, heads, S, D/heads]`.
///
/// With `mask: [B, S]`, column `j` of every row other than `j` itself is
/// switched off when `mask[j] = 0`, and the row renormalised.
pub fn attention_weights<'g, T: Element>(
    p: &Binder<'_, 'g, T>,
    x: Var<'g, T>,
    mask: Option<Var<'g, T>>,
    heads: usize,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let &[b, s, d] = x.shape().as_slice() else {
        return Err(Error::Layout(format!("attention expects [B, S, D], got {:?}", x.shape())));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide {d}")));
    }
    let dh = d / heads;
    let qkv = linear(p, "qkv", x)?
        .reshape(&[b, s, 3, heads, dh])?
        .permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| -> Result<Var<'g, T>> { Ok(qkv.slice(0, i, 1)?.reshape(&[b, heads, s, dh])?) };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let scores = q.matmul(k.permute(&[0, 1, 3, 2])?)?.scale(1.0 / (dh as f64).sqrt())?;
    let attn = match mask {
        Some(m) => scores.masked_softmax(m)?,
        None => scores.softmax()?,
    };
    Ok((attn, v))
}

pub fn self_attention<'g, T: Element>(
    p: &Binder<'_, 'g, T>,
    x: Var<'g, T>,
    mask: Option<Var<'g, T>>,
    heads: usize,
) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (attn, v) = attention_weights(p, x, mask, heads)?;
    let mixed = attn.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&s)?;
    linear(p, "proj", mixed)
}

/// Pre-norm residual block: `x + MSA(LN(x))`, then `+ FFN(LN(.))`.
pub fn transformer_layer<'g, T: Element>(
    p: &Binder<'_, 'g, T>,
    x: Var<'g, T>,
    mask: Option<Var<'g, T>>,
    heads: usize,
) -> Result<Var<'g, T>> {
    let h = x.add(self_attention(p, layer_norm(p, "ln1", x)?, mask, heads)?)?;
    let f = linear(p, "fc1", layer_norm(p, "ln2", h)?)?.gelu()?;
    Ok(h.add(linear(p, "fc2", f)?)?)
}

/// Shape of a plain ViT classifier over tubelet tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VitShape {
    pub layout: TubeletLayout,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub outputs: usize,
}

impl VitShape {
    /// Sequence length including the class token.
    pub fn sequence_len(&self) -> usize {
        self.layout.tokens() + 1
    }
}

/// Names: `embed`, `cls: [1, 1, D]`, `pos: [LN + 1, D]`, `layer.{i}`, `norm`, `head`.
pub fn init_vit(store: &mut ParamStore, shape: &VitShape, rng: &mut RngState) {
    let d = shape.dim;
    init_linear(store, "embed", shape.layout.patch_len(), d, rng);
    store.insert("cls", small_uniform(&[1, 1, d], 0.02, rng));
    store.insert("pos", small_uniform(&[shape.sequence_len(), d], 0.02, rng));
    for i in 0..shape.depth {
        init_layer(store, &format!("layer.{i}"), d, rng);
    }
    init_layer_norm(store, "norm", d);
    init_linear(store, "head", d, shape.outputs, rng);
}

/// Tokenizes `[B, T, H, W, 3]` pixels with the classifier's own embedding,
/// prepends the class token and returns `[B, outputs]` logits read from it.
pub fn vit_classify<'g, T: Element>(p: &Binder<'_, 'g, T>, video: Var<'g, T>, shape: &VitShape) -> Result<Var<'g, T>> {
    let patches = shape.layout.extract(video)?;
    let b = patches.shape()[0];
    let d = shape.dim;
    let tokens = embed_tokens(patches, p.get("embed.w")?, p.get("embed.b")?)?;
    let cls = p.get("cls")?.broadcast_to(&[b, 1, d])?;
    let mut x = vidpriv_tensor::Var::concat(&[cls, tokens], 1)?.add(p.get("pos")?)?;
    for i in 0..shape.depth {
        x = transformer_layer(&p.scope(&format!("layer.{i}")), x, None, shape.heads)?;
    }
    let x = layer_norm(p, "norm", x)?;
    let cls_out = x.slice(1, 0, 1)?.reshape(&[b, d])?;
    linear(p, "head", cls_out)
}
