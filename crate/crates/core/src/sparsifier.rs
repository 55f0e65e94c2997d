//! Sparsification blocks: multi-level aggregation, keep probabilities,
//! Gumbel-Softmax decisions, the keep-ratio loss and inference top-k.

use vidpriv_tensor::{Binder, Element, ParamStore, RngState, Tensor, Var};

use crate::attention::init_layer;
use crate::error::{Error, Result};
use crate::nn::{init_linear, linear};
use crate::tokenizer::DecisionMatrix;

/// Channel of the keep probability in the last axis of `z`.
pub const KEEP: usize = 0;

/// Registers one block under `prefix`: `layer.{i}`, the three aggregation
/// branches `agg.{local,spatial,spatemp}` (`D -> D/3` each) and the keep head
/// `keep.l1..l3` (`D -> D/2 -> D/4 -> 2`).
pub fn init_block(store: &mut ParamStore, prefix: &str, dim: usize, layers: usize, rng: &mut RngState) {
    for i in 0..layers {
        init_layer(store, &format!("{prefix}.layer.{i}"), dim, rng);
    }
    for branch in ["local", "spatial", "spatemp"] {
        init_linear(store, &format!("{prefix}.agg.{branch}"), dim, dim / 3, rng);
    }
    init_linear(store, &format!("{prefix}.keep.l1"), dim, dim / 2, rng);
    init_linear(store, &format!("{prefix}.keep.l2"), dim / 2, dim / 4, rng);
    init_linear(store, &format!("{prefix}.keep.l3"), dim / 4, 2, rng);
}

fn branch<'g, T: Element>(p: &Binder<'_, 'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(linear(p, &format!("agg.{name}"), x)?.gelu()?)
}

/// Sparsification evidence for `[B, L, N, D]` tokens under a `[B, L, N]`
/// decision: a per-token branch, a branch averaged over the retained tokens
/// of each temporal slice and one averaged over all retained tokens, each
/// `D/3` wide and concatenated.
pub fn multi_level_aggregate<'g, T: Element>(
    p: &Binder<'_, 'g, T>,
    x: Var<'g, T>,
    decision: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let s = x.shape();
    let &[b, l, n, d] = s.as_slice() else {
        return Err(Error::Layout(format!("aggregation expects [B, L, N, D], got {s:?}")));
    };
    if d % 3 != 0 {
        return Err(Error::Config(format!("token width {d} is not divisible by 3")));
    }
    let k = d / 3;
    let local = branch(p, "local", x)?;
    let spatial = branch(p, "spatial", x)?
        .masked_mean(decision, 2)?
        .reshape(&[b, l, 1, k])?
        .broadcast_to(&[b, l, n, k])?;
    let spatemp = branch(p, "spatemp", x)?
        .reshape(&[b, l * n, k])?
        .masked_mean(decision.reshape(&[b, l * n])?, 1)?
        .reshape(&[b, 1, 1, k])?
        .broadcast_to(&[b, l, n, k])?;
    Ok(Var::concat(&[local, spatial, spatemp], 3)?)
}

/// The same evidence for the `K` retained tokens of one clip held as `[K, D]`
/// rows, where `slice_of[r]` is the temporal slice of row `r`.
pub fn aggregate_retained<'g, T: Element>(
    p: &Binder<'_, 'g, T>,
    x: Var<'g, T>,
    slice_of: &[usize],
    slices: usize,
) -> Result<Var<'g, T>> {
    let s = x.shape();
    let &[rows, d] = s.as_slice() else {
        return Err(Error::Layout(format!("expected [K, D] rows, got {s:?}")));
    };
    if d % 3 != 0 {
        return Err(Error::Config(format!("token width {d} is not divisible by 3")));
    }
    let local = branch(p, "local", x)?;
    let spatial = branch(p, "spatial", x)?.segment_mean(slice_of, slices)?.gather_rows(slice_of)?;
    let spatemp = branch(p, "spatemp", x)?
        .mean_axis(0)?
        .reshape(&[1, d / 3])?
        .broadcast_to(&[rows, d / 3])?;
    Ok(Var::concat(&[local, spatial, spatemp], 1)?)
}

/// Logits of the keep head; `softmax` of these is `z`.
pub fn keep_logits<'g, T: Element>(p: &Binder<'_, 'g, T>, evidence: Var<'g, T>) -> Result<Var<'g, T>> {
    let h = linear(p, "keep.l1", evidence)?.gelu()?;
    let h = linear(p, "keep.l2", h)?.gelu()?;
    linear(p, "keep.l3", h)
}

/// Keep probabilities `z` (`[.., 2]`, channel 0 keeps).
pub fn predict_keep_probs<'g, T: Element>(p: &Binder<'_, 'g, T>, evidence: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(keep_logits(p, evidence)?.softmax()?)
}

/// Hard decisions from Gumbel-perturbed log-probabilities.
///
/// `noise` has the shape of `logits` (`[.., 2]`). The forward value is the
/// hard 0/1 keep decision; gradients flow through the tempered softmax of
/// the perturbed log-probabilities.
pub fn gumbel_decide<'g, T: Element>(logits: Var<'g, T>, noise: &Tensor<T>, tau: f64) -> Result<Var<'g, T>> {
    let s = logits.shape();
    if s.last() != Some(&2) || noise.shape() != s.as_slice() {
        return Err(Error::Layout(format!("gumbel noise {:?} for logits {s:?}", noise.shape())));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let g = logits.graph();
    let perturbed = logits.log_softmax()?.add(g.constant(noise.clone()))?.scale(1.0 / tau)?;
    let outer = &s[..s.len() - 1];
    let soft_keep = perturbed.softmax()?.slice(s.len() - 1, KEEP, 1)?.reshape(outer)?;
    let pv = perturbed.value();
    let hard = Tensor::from_fn(outer, |i| {
        let pair = &pv.data()[2 * i..2 * i + 2];
        if pair[KEEP] >= pair[1 - KEEP] {
            T::one()
        } else {
            T::zero()
        }
    });
    Ok(soft_keep.straight_through(hard)?)
}

/// Noise-free decision: keep where `z_keep >= z_abandon`.
pub fn argmax_decide<T: Element>(z: &Tensor<T>) -> Tensor<T> {
    let outer = &z.shape()[..z.rank() - 1];
    Tensor::from_fn(outer, |i| {
        if z.data()[2 * i + KEEP] >= z.data()[2 * i + 1 - KEEP] {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Keep-ratio penalty over the cumulative decisions of all `M` blocks, each
/// `[B, L, N]`: the mean over batch, blocks and slices of
/// `(mean_n I_m(l, n) - alpha^m)^2`.
pub fn sparsification_loss<'g, T: Element>(decisions: &[Var<'g, T>], alpha: f64) -> Result<Var<'g, T>> {
    let first = decisions.first().ok_or(Error::EmptyInput("decision list"))?;
    let s = first.shape();
    let &[b, l, _] = s.as_slice() else {
        return Err(Error::Layout(format!("decisions must be [B, L, N], got {s:?}")));
    };
    let mut total: Option<Var<'g, T>> = None;
    for (m, d) in decisions.iter().enumerate() {
        if d.shape() != s {
            return Err(Error::Layout("decision shapes differ between blocks".into()));
        }
        let diff = d.mean_axis(2)?.add_scalar(-alpha.powi(m as i32 + 1))?;
        let term = diff.mul(diff)?.sum_all()?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    let denom = (decisions.len() * l * b) as f64;
    Ok(total.expect("non-empty").scale(1.0 / denom)?)
}

/// [`sparsification_loss`] for the decisions of a single clip, in `f64`.
pub fn sparsification_loss_value(decisions: &[DecisionMatrix], alpha: f64) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::EmptyInput("decision list"));
    }
    let mut total = 0.0;
    let mut slices = 0;
    for (m, d) in decisions.iter().enumerate() {
        let target = alpha.powi(m as i32 + 1);
        for c in d.slice_counts() {
            let frac = c as f64 / d.spatial() as f64;
            total += (frac - target).powi(2);
        }
        slices = d.temporal();
    }
    Ok(total / (decisions.len() * slices) as f64)
}

/// Tokens kept out of `retained` at ratio `alpha`: round half up, at least one.
pub fn keep_count(retained: usize, alpha: f64) -> usize {
    ((alpha * retained as f64 + 0.5).floor() as usize).clamp(1, retained.max(1))
}

/// Keeps the `count` currently retained tokens with the highest keep
/// probability; ties go to the lower flattened index.
pub fn topk_select(keep_prob: &[f64], current: &DecisionMatrix, count: usize) -> Result<DecisionMatrix> {
    let mut idx = current.retained_indices();
    if idx.is_empty() {
        return Err(Error::EmptyInput("no retained tokens to select from"));
    }
    if keep_prob.len() != current.bits().len() {
        return Err(Error::Layout(format!(
            "{} keep probabilities for {} tokens",
            keep_prob.len(),
            current.bits().len()
        )));
    }
    idx.sort_by(|&a, &b| keep_prob[b].total_cmp(&keep_prob[a]).then(a.cmp(&b)));
    let mut keep = vec![false; current.bits().len()];
    for &i in idx.iter().take(count) {
        keep[i] = true;
    }
    DecisionMatrix::from_bits(current.temporal(), current.spatial(), keep)
}

/// Inference selection for one block at keep ratio `alpha`.
pub fn topk_select_inference(keep_prob: &[f64], current: &DecisionMatrix, alpha: f64) -> Result<DecisionMatrix> {
    topk_select(keep_prob, current, keep_count(current.retained(), alpha))
}

/// Like [`topk_select_inference`] but counted inside each temporal slice.
pub fn topk_select_per_frame(keep_prob: &[f64], current: &DecisionMatrix, alpha: f64) -> Result<DecisionMatrix> {
    if current.retained() == 0 {
        return Err(Error::EmptyInput("no retained tokens to select from"));
    }
    let (l, n) = (current.temporal(), current.spatial());
    let mut keep = vec![false; l * n];
    for t in 0..l {
        let slice = DecisionMatrix::from_bits(1, n, current.bits()[t * n..(t + 1) * n].to_vec())?;
        if slice.retained() == 0 {
            continue;
        }
        let chosen = topk_select_inference(&keep_prob[t * n..(t + 1) * n], &slice, alpha)?;
        keep[t * n..(t + 1) * n].copy_from_slice(chosen.bits());
    }
    DecisionMatrix::from_bits(l, n, keep)
}
