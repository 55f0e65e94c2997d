//! Shape arithmetic shared by the forward kernels and their adjoints.

use crate::error::{Result, TensorError};
use crate::tensor::{numel, strides};

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::shape(op, a, b)),
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// For each element of `out_shape`, the flat offset of the element of
/// `in_shape` it reads under numpy-style broadcasting.
pub fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for d in 0..in_shape.len() {
        if in_shape[d] != 1 {
            eff[pad + d] = in_strides[d];
        }
    }
    let total = numel(out_shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// How an operand of a broadcast binary op maps onto the output.
pub enum Layout {
    /// Same shape as the output.
    Same,
    /// Operand repeats every `period` output elements (trailing-dims bias).
    Repeat(usize),
    /// Arbitrary broadcast: explicit per-element offsets.
    Offsets(Vec<usize>),
}

pub fn layout_for(out_shape: &[usize], in_shape: &[usize]) -> Layout {
    if out_shape == in_shape {
        return Layout::Same;
    }
    let n = numel(in_shape);
    let trimmed: Vec<usize> = {
        let first = in_shape.iter().position(|&d| d != 1).unwrap_or(in_shape.len());
        in_shape[first..].to_vec()
    };
    if trimmed.len() <= out_shape.len() && out_shape.ends_with(&trimmed) && n > 0 {
        return Layout::Repeat(n);
    }
    Layout::Offsets(broadcast_offsets(out_shape, in_shape))
}

pub fn permuted_shape(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(TensorError::invalid("permute", format!("permutation {perm:?} for rank {}", shape.len())));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(TensorError::invalid("permute", format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

/// Gather `src` (with `shape`) into permuted order.
pub fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    // Innermost loop over the last output axis is a strided copy.
    let inner = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let outer = total / inner.max(1);
    for _ in 0..outer {
        let mut o = off;
        for _ in 0..inner {
            out.push(src[o]);
            o += inner_step;
        }
        for d in (0..rank.saturating_sub(1)).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Splits `shape` around `axis` into (outer, len, inner) element counts.
pub fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
