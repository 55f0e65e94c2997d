//! The anonymization block: masked transformer layers followed by a
//! per-token linear map back to tubelet pixels.

use vidpriv_tensor::{Binder, Element, ParamStore, RngState, Tensor, Var};

use crate::attention::{init_layer, transformer_layer};
use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, layer_norm, linear, xavier};
use crate::tokenizer::TubeletLayout;

/// Initial output bias: mid-gray pixels.
pub const OUTPUT_BIAS: f32 = 0.5;

/// Names under `prefix`: `layer.{i}`, `norm`, `out` (`D -> 3 dt dh dw`).
pub fn init_anonymizer(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    layers: usize,
    patch_len: usize,
    rng: &mut RngState,
) {
    for i in 0..layers {
        init_layer(store, &format!("{prefix}.layer.{i}"), dim, rng);
    }
    init_layer_norm(store, &format!("{prefix}.norm"), dim);
    store.insert(format!("{prefix}.out.w"), xavier(dim, patch_len, rng));
    store.insert(format!("{prefix}.out.b"), Tensor::full(&[patch_len], OUTPUT_BIAS));
}

/// `[B, S, D]` tokens to `[B, S, 3 dt dh dw]` pixel rows in `[0, 1]`.
///
/// `mask: [B, S]` restricts attention to retained tokens; the output map is
/// applied to every row.
pub fn anonymize_patches<'g, T: Element>(
    p: &Binder<'_, 'g, T>,
    tokens: Var<'g, T>,
    mask: Option<Var<'g, T>>,
    layers: usize,
    heads: usize,
) -> Result<Var<'g, T>> {
    let mut x = tokens;
    for i in 0..layers {
        x = transformer_layer(&p.scope(&format!("layer.{i}")), x, mask, heads)?;
    }
    let x = layer_norm(p, "norm", x)?;
    Ok(linear(p, "out", x)?.clamp(0.0, 1.0)?)
}

/// [`anonymize_patches`] followed by the inverse tubelet reshape, giving a
/// `[B, T, H, W, 3]` video.
pub fn anonymize_tokens<'g, T: Element>(
    p: &Binder<'_, 'g, T>,
    tokens: Var<'g, T>,
    mask: Var<'g, T>,
    layout: &TubeletLayout,
    layers: usize,
    heads: usize,
) -> Result<Var<'g, T>> {
    if tokens.shape().get(1) != Some(&layout.tokens()) {
        return Err(Error::Layout(format!(
            "{:?} tokens for a layout of {}",
            tokens.shape(),
            layout.tokens()
        )));
    }
    let rows = anonymize_patches(p, tokens, Some(mask), layers, heads)?;
    layout.assemble(rows)
}
