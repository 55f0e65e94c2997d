//! Parameter initialisation and the small building blocks shared by the
//! transformer, the sparsifier heads and the recognizers.

use vidpriv_tensor::{Binder, Element, ParamStore, RngState, Tensor, Var};

use crate::error::Result;

/// Glorot/Xavier uniform `[fan_in, fan_out]` matrix.
pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut RngState) -> Tensor<f32> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.uniform_range(-a, a) as f32)
}

/// Small uniform values for embeddings and tokens (`+-scale`).
pub fn small_uniform(shape: &[usize], scale: f64, rng: &mut RngState) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.uniform_range(-scale, scale) as f32)
}

/// Registers `{name}.w: [fan_in, fan_out]` and a zero `{name}.b`.
pub fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngState) {
    store.insert(format!("{name}.w"), xavier(fan_in, fan_out, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::ones(&[dim]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

pub fn linear<'g, T: Element>(p: &Binder<'_, 'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(x.matmul(w)?.add(b)?)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm<'g, T: Element>(p: &Binder<'_, 'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let g = p.get(&format!("{name}.g"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(x.layer_norm(g, b, LAYER_NORM_EPS)?)
}
