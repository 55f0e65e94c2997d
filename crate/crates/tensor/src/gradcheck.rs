//! Central finite-difference verification of analytic gradients.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / scale`, with `scale` the largest
    /// gradient magnitude seen in either estimate (floored at 1e-8).
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `backward` against central differences of `f` at `point`,
/// refined by Ridders' extrapolation starting from step `eps`.
///
/// `f` builds a scalar from the input var on a fresh graph; it is evaluated
/// twice at `point` first and must return bit-identical values. Any error
/// type that can absorb a [`TensorError`] may be used by `f`.
pub fn grad_check<T, E, F>(f: F, point: &Tensor<T>, eps: f64, tol: f64) -> Result<GradCheckReport, E>
where
    T: Element,
    E: From<TensorError>,
    F: for<'g> Fn(&'g Graph<T>, Var<'g, T>) -> Result<Var<'g, T>, E>,
{
    let all: Vec<usize> = (0..point.numel()).collect();
    grad_check_at(f, point, &all, eps, tol)
}

/// As [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_at<T, E, F>(
    f: F,
    point: &Tensor<T>,
    coords: &[usize],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    T: Element,
    E: From<TensorError>,
    F: for<'g> Fn(&'g Graph<T>, Var<'g, T>) -> Result<Var<'g, T>, E>,
{
    if !(eps > 0.0) {
        return Err(TensorError::invalid("grad_check", "eps must be positive").into());
    }
    let eval = |p: &Tensor<T>| -> Result<T, E> {
        let g = Graph::new();
        let x = g.constant(p.clone());
        Ok(f(&g, x)?.item())
    };
    let (v1, v2) = (eval(point)?, eval(point)?);
    if v1.as_f64().to_bits() != v2.as_f64().to_bits() {
        return Err(TensorError::NonDeterministic.into());
    }

    let g = Graph::new();
    let x = g.input(point.clone());
    let loss = f(&g, x)?;
    let grads = g.backward(loss)?;
    let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut numeric = Vec::with_capacity(coords.len());
    let central = |i: usize, h: f64| -> Result<f64, E> {
        let mut plus = point.clone();
        let mut minus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + T::from_f64(h);
        minus.data_mut()[i] = minus.data()[i] - T::from_f64(h);
        // Use the step actually representable in T.
        let step = plus.data()[i].as_f64() - minus.data()[i].as_f64();
        Ok((eval(&plus)?.as_f64() - eval(&minus)?.as_f64()) / step)
    };
    for &i in coords {
        numeric.push(ridders(|h| central(i, h), eps)?);
    }
    let mut scale: f64 = 1e-8;
    for (k, &i) in coords.iter().enumerate() {
        scale = scale.max(analytic.data()[i].as_f64().abs()).max(numeric[k].abs());
    }
    let mut max_abs = 0.0f64;
    let mut worst = coords.first().copied().unwrap_or(0);
    for (k, &i) in coords.iter().enumerate() {
        let e = (analytic.data()[i].as_f64() - numeric[k]).abs();
        if e > max_abs {
            max_abs = e;
            worst = i;
        }
    }
    let rel = max_abs / scale;
    Ok(GradCheckReport {
        max_rel_error: rel,
        max_abs_error: max_abs,
        worst_index: worst,
        checked: coords.len(),
        tol,
        passed: rel <= tol,
    })
}

/// Ridders' extrapolation over central differences with steps shrinking
/// from `h0`; returns the estimate with the smallest error bound.
fn ridders<E>(mut central: impl FnMut(f64) -> Result<f64, E>, h0: f64) -> Result<f64, E> {
    const SHRINK: f64 = 1.4;
    const SHRINK2: f64 = SHRINK * SHRINK;
    const ROUNDS: usize = 8;
    let mut table = [[0.0f64; ROUNDS]; ROUNDS];
    let mut h = h0;
    table[0][0] = central(h)?;
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..ROUNDS {
        h /= SHRINK;
        table[0][i] = central(h)?;
        let mut fac = SHRINK2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK2;
            let e = (table[j][i] - table[j - 1][i]).abs().max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok(best)
}
