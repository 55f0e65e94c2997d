//! Vector-Jacobian products for every primitive in [`crate::graph::Op`].

use crate::element::Element;
use crate::error::Result;
use crate::graph::{Node, NodeId, Op};
use crate::ops::{broadcast_binary, gelu_grad, sigmoid};
use crate::shape::{self, Layout};
use crate::tensor::{numel, Tensor};

type Grads<T> = Vec<(NodeId, Tensor<T>)>;

/// Sums a gradient of broadcast shape `out_shape` back onto `in_shape`.
fn reduce_to<T: Element>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    match shape::layout_for(g.shape(), in_shape) {
        Layout::Same => g.clone(),
        Layout::Repeat(p) => {
            let mut out = vec![T::zero(); p];
            for chunk in g.data().chunks(p) {
                for (a, &x) in out.iter_mut().zip(chunk) {
                    *a = *a + x;
                }
            }
            Tensor::from_vec(in_shape, out).expect("reduce_to shape")
        }
        Layout::Offsets(offs) => {
            let mut out = vec![T::zero(); numel(in_shape)];
            for (&o, &x) in offs.iter().zip(g.data()) {
                out[o] = out[o] + x;
            }
            Tensor::from_vec(in_shape, out).expect("reduce_to shape")
        }
    }
}

pub(crate) fn vjp<T: Element>(nodes: &[Node<T>], id: NodeId, g: Tensor<T>) -> Result<Grads<T>> {
    let node = &nodes[id];
    let val = |i: NodeId| &*nodes[i].value;
    let rg = |i: NodeId| nodes[i].requires_grad;
    let out = &*node.value;
    let mut res: Grads<T> = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if rg(*a) {
                res.push((*a, reduce_to(&g, val(*a).shape())));
            }
            if rg(*b) {
                res.push((*b, reduce_to(&g, val(*b).shape())));
            }
        }
        Op::Sub { a, b } => {
            if rg(*a) {
                res.push((*a, reduce_to(&g, val(*a).shape())));
            }
            if rg(*b) {
                res.push((*b, reduce_to(&g, val(*b).shape()).map(|x| -x)));
            }
        }
        Op::Mul { a, b } => {
            if rg(*a) {
                let ga = broadcast_binary("mul", &g, val(*b), |x, y| x * y)?;
                res.push((*a, reduce_to(&ga, val(*a).shape())));
            }
            if rg(*b) {
                let gb = broadcast_binary("mul", &g, val(*a), |x, y| x * y)?;
                res.push((*b, reduce_to(&gb, val(*b).shape())));
            }
        }
        Op::Scale { a, c } => res.push((*a, g.map(|x| x * *c))),
        Op::AddScalar { a } => res.push((*a, g)),
        Op::MatMul { a, b, batched } => matmul_vjp(val(*a), val(*b), &g, *batched, rg(*a), rg(*b), *a, *b, &mut res)?,
        Op::Exp { a } => res.push((*a, zip_map(&g, out, |g, y| g * y))),
        Op::Log { a } => res.push((*a, zip_map(&g, val(*a), |g, x| g / x))),
        Op::Sigmoid { a } => res.push((*a, zip_map(&g, out, |g, y| g * y * (T::one() - y)))),
        Op::Gelu { a } => res.push((*a, zip_map(&g, val(*a), |g, x| g * gelu_grad(x)))),
        Op::Softplus { a } => res.push((*a, zip_map(&g, val(*a), |g, x| g * sigmoid(x)))),
        Op::Clamp { a, lo, hi } => res.push((
            *a,
            zip_map(&g, val(*a), |g, x| if x >= *lo && x <= *hi { g } else { T::zero() }),
        )),
        Op::Reshape { a } => res.push((*a, g.reshaped(val(*a).shape())?)),
        Op::Permute { a, perm } => {
            let inv = shape::inverse_permutation(perm);
            let data = shape::permute_data(g.data(), g.shape(), &inv);
            res.push((*a, Tensor::from_vec(val(*a).shape(), data)?));
        }
        Op::BroadcastTo { a } => res.push((*a, reduce_to(&g, val(*a).shape()))),
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = shape::split_at_axis(g.shape(), *axis);
            let mut offset = 0;
            for &i in inputs {
                let s = val(i).shape();
                let len = s[*axis];
                if rg(i) {
                    let mut data = Vec::with_capacity(numel(s));
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    res.push((i, Tensor::from_vec(s, data)?));
                }
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            let s = val(*a).shape();
            let (outer, dim, inner) = shape::split_at_axis(s, *axis);
            let len = g.shape()[*axis];
            let mut data = vec![T::zero(); numel(s)];
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                data[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            res.push((*a, Tensor::from_vec(s, data)?));
        }
        Op::GatherRows { a, rows } => {
            let s = val(*a).shape();
            let inner: usize = s[1..].iter().product();
            let mut data = vec![T::zero(); numel(s)];
            for (k, &r) in rows.iter().enumerate() {
                for (d, &x) in data[r * inner..(r + 1) * inner].iter_mut().zip(&g.data()[k * inner..(k + 1) * inner]) {
                    *d = *d + x;
                }
            }
            res.push((*a, Tensor::from_vec(s, data)?));
        }
        Op::SumAll { a } => res.push((*a, Tensor::full(val(*a).shape(), g.item()))),
        Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
            let s = val(*a).shape();
            let (outer, dim, inner) = shape::split_at_axis(s, *axis);
            let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                T::one() / T::from_f64(dim as f64)
            } else {
                T::one()
            };
            let mut data = Vec::with_capacity(numel(s));
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..dim {
                    data.extend(src.iter().map(|&x| x * scale));
                }
            }
            res.push((*a, Tensor::from_vec(s, data)?));
        }
        Op::MaskedMean { x, mask, axis, counts } => {
            let xv = val(*x);
            let mv = val(*mask);
            let (outer, dim, inner) = shape::split_at_axis(xv.shape(), *axis);
            if rg(*x) {
                let mut dx = vec![T::zero(); xv.numel()];
                for o in 0..outer {
                    if counts[o] == T::zero() {
                        continue;
                    }
                    for d in 0..dim {
                        let w = mv.data()[o * dim + d] / counts[o];
                        let dst = &mut dx[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        for (a, &gg) in dst.iter_mut().zip(&g.data()[o * inner..(o + 1) * inner]) {
                            *a = gg * w;
                        }
                    }
                }
                res.push((*x, Tensor::from_vec(xv.shape(), dx)?));
            }
            if rg(*mask) {
                let mut dm = vec![T::zero(); mv.numel()];
                for o in 0..outer {
                    if counts[o] == T::zero() {
                        continue;
                    }
                    let go = &g.data()[o * inner..(o + 1) * inner];
                    let mo = &out.data()[o * inner..(o + 1) * inner];
                    for d in 0..dim {
                        let xs = &xv.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        let acc: T = (0..inner).map(|i| go[i] * (xs[i] - mo[i])).sum();
                        dm[o * dim + d] = acc / counts[o];
                    }
                }
                res.push((*mask, Tensor::from_vec(mv.shape(), dm)?));
            }
        }
        Op::SegmentMean { x, segments, counts } => {
            let xv = val(*x);
            let f = xv.shape()[1];
            let mut dx = vec![T::zero(); xv.numel()];
            for (r, &seg) in segments.iter().enumerate() {
                let c = counts[seg];
                for (a, &gg) in dx[r * f..(r + 1) * f].iter_mut().zip(&g.data()[seg * f..(seg + 1) * f]) {
                    *a = gg / c;
                }
            }
            res.push((*x, Tensor::from_vec(xv.shape(), dx)?));
        }
        Op::Softmax { a } => {
            let c = *out.shape().last().unwrap();
            let mut dx = vec![T::zero(); out.numel()];
            for ((d, y), gg) in dx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                let dot: T = y.iter().zip(gg).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    d[j] = y[j] * (gg[j] - dot);
                }
            }
            res.push((*a, Tensor::from_vec(out.shape(), dx)?));
        }
        Op::LogSoftmax { a } => {
            let c = *out.shape().last().unwrap();
            let mut dx = vec![T::zero(); out.numel()];
            for ((d, y), gg) in dx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                let total: T = gg.iter().copied().sum();
                for j in 0..c {
                    d[j] = gg[j] - y[j].exp() * total;
                }
            }
            res.push((*a, Tensor::from_vec(out.shape(), dx)?));
        }
        Op::MaskedSoftmax { s, mask, relaxed } => {
            let sh = out.shape();
            let c = sh[sh.len() - 1];
            let mut ds = vec![T::zero(); out.numel()];
            let mshape = val(*mask).shape().to_vec();
            let mut dm = vec![T::zero(); numel(&mshape)];
            let rows_per_mask = out.numel() / dm.len();
            let track = rg(*mask);
            for (r, (y, gg)) in out.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                let dot: T = y.iter().zip(gg).map(|(&a, &b)| a * b).sum();
                let d = &mut ds[r * c..(r + 1) * c];
                for j in 0..c {
                    d[j] = y[j] * (gg[j] - dot);
                }
                if track {
                    let i = r % c;
                    let p = &relaxed.data()[r * c..(r + 1) * c];
                    let dmr = &mut dm[(r / rows_per_mask) * c..][..c];
                    for j in 0..c {
                        if j != i {
                            dmr[j] = dmr[j] + p[j] * (gg[j] - dot);
                        }
                    }
                }
            }
            if rg(*s) {
                res.push((*s, Tensor::from_vec(sh, ds)?));
            }
            if track {
                res.push((*mask, Tensor::from_vec(&mshape, dm)?));
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let sh = xhat.shape();
            let f = *sh.last().unwrap();
            let gam = val(*gamma).data();
            let nf = T::from_f64(f as f64);
            if rg(*x) {
                let mut dx = vec![T::zero(); xhat.numel()];
                for (r, ((d, h), gg)) in dx
                    .chunks_mut(f)
                    .zip(xhat.data().chunks(f))
                    .zip(g.data().chunks(f))
                    .enumerate()
                {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..f {
                        let dh = gg[j] * gam[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * h[j];
                    }
                    mean_dh = mean_dh / nf;
                    mean_dh_h = mean_dh_h / nf;
                    for j in 0..f {
                        let dh = gg[j] * gam[j];
                        d[j] = rstd[r] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                res.push((*x, Tensor::from_vec(sh, dx)?));
            }
            if rg(*gamma) {
                let mut dg = vec![T::zero(); f];
                for (h, gg) in xhat.data().chunks(f).zip(g.data().chunks(f)) {
                    for j in 0..f {
                        dg[j] = dg[j] + gg[j] * h[j];
                    }
                }
                res.push((*gamma, Tensor::from_vec(&[f], dg)?));
            }
            if rg(*beta) {
                let mut db = vec![T::zero(); f];
                for gg in g.data().chunks(f) {
                    for j in 0..f {
                        db[j] = db[j] + gg[j];
                    }
                }
                res.push((*beta, Tensor::from_vec(&[f], db)?));
            }
        }
        Op::StraightThrough { soft } => res.push((*soft, g)),
    }
    Ok(res)
}

fn zip_map<T: Element>(g: &Tensor<T>, x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_vec(x.shape(), data).expect("zip_map shape")
}

#[allow(clippy::too_many_arguments)]
fn matmul_vjp<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    batched: bool,
    need_a: bool,
    need_b: bool,
    ia: NodeId,
    ib: NodeId,
    res: &mut Grads<T>,
) -> Result<()> {
    let sb = b.shape();
    let (k, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if batched {
        let sa = a.shape();
        let m = sa[sa.len() - 2];
        let batch = a.numel() / (m * k).max(1);
        let mut da = vec![T::zero(); if need_a { a.numel() } else { 0 }];
        let mut db = vec![T::zero(); if need_b { b.numel() } else { 0 }];
        for i in 0..batch {
            let gi = &g.data()[i * m * n..(i + 1) * m * n];
            let ai = &a.data()[i * m * k..(i + 1) * m * k];
            let bi = &b.data()[i * k * n..(i + 1) * k * n];
            if need_a {
                T::gemm(m, n, k, gi, n as isize, 1, bi, 1, n as isize, T::zero(), &mut da[i * m * k..(i + 1) * m * k]);
            }
            if need_b {
                T::gemm(k, m, n, ai, 1, k as isize, gi, n as isize, 1, T::zero(), &mut db[i * k * n..(i + 1) * k * n]);
            }
        }
        if need_a {
            res.push((ia, Tensor::from_vec(a.shape(), da)?));
        }
        if need_b {
            res.push((ib, Tensor::from_vec(b.shape(), db)?));
        }
    } else {
        let rows = a.numel() / k.max(1);
        if need_a {
            let mut da = vec![T::zero(); a.numel()];
            T::gemm(rows, n, k, g.data(), n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut da);
            res.push((ia, Tensor::from_vec(a.shape(), da)?));
        }
        if need_b {
            let mut db = vec![T::zero(); b.numel()];
            T::gemm(k, rows, n, a.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut db);
            res.push((ib, Tensor::from_vec(b.shape(), db)?));
        }
    }
    Ok(())
}
