//! Scalar training objectives.

use vidpriv_tensor::{Element, Tensor, Var};

use crate::config::LossWeights;
use crate::error::{Error, Result};

/// Mean cross-entropy of `[B, C]` logits against class indices.
pub fn action_loss<'g, T: Element>(logits: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>> {
    let s = logits.shape();
    let &[b, c] = s.as_slice() else {
        return Err(Error::Layout(format!("action logits must be [B, C], got {s:?}")));
    };
    if c < 2 || labels.len() != b {
        return Err(Error::Layout(format!("{} labels for logits {s:?}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Label(format!("class {bad} with {c} classes")));
    }
    let onehot = Tensor::from_fn(&[b, c], |i| if labels[i / c] == i % c { T::one() } else { T::zero() });
    let picked = logits.log_softmax()?.mul(logits.graph().constant(onehot))?.sum_all()?;
    Ok(picked.scale(-1.0 / b as f64)?)
}

/// Binary targets for [`privacy_loss`] from per-sample flags.
pub fn privacy_targets<T: Element>(labels: &[Vec<bool>]) -> Result<Tensor<T>> {
    let p = labels.first().map(Vec::len).ok_or(Error::EmptyInput("privacy labels"))?;
    if labels.iter().any(|l| l.len() != p) {
        return Err(Error::Label("privacy label rows differ in length".into()));
    }
    let flat: Vec<T> = labels.iter().flatten().map(|&y| if y { T::one() } else { T::zero() }).collect();
    Ok(Tensor::from_vec(&[labels.len(), p], flat)?)
}

/// Mean binary cross-entropy of `[.., P]` logits against 0/1 targets of the
/// same shape, in the stable form `softplus(s) - y s`.
pub fn privacy_loss<'g, T: Element>(logits: Var<'g, T>, targets: &Tensor<T>) -> Result<Var<'g, T>> {
    if logits.shape() != targets.shape() {
        return Err(Error::Layout(format!(
            "privacy logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if targets.data().iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::Label("privacy targets must be 0 or 1".into()));
    }
    let y = logits.graph().constant(targets.clone());
    Ok(logits.softplus()?.sub(logits.mul(y)?)?.mean_all()?)
}

/// Initialization objective: keep-ratio penalty plus the model's own action loss.
pub fn init_objective<'g, T: Element>(spars: Var<'g, T>, action: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(spars.add(action)?)
}

/// `spars + w.action * action - w.privacy * privacy`.
pub fn adversarial_objective<'g, T: Element>(
    spars: Var<'g, T>,
    action: Var<'g, T>,
    privacy: Var<'g, T>,
    w: LossWeights,
) -> Result<Var<'g, T>> {
    Ok(spars.add(action.scale(w.action)?)?.sub(privacy.scale(w.privacy)?)?)
}
