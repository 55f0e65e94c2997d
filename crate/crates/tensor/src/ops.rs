//! Forward definitions of the differentiable primitives.

use std::rc::Rc;

use crate::element::{lit, Element};
use crate::error::{Result, TensorError};
use crate::graph::{NodeId, Op, Var};
use crate::shape::{self, Layout};
use crate::tensor::{numel, Tensor};

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Exponent cap for the relaxed (masked-out) softmax weights kept for the
/// mask gradient; the forward attention never uses them.
pub(crate) const RELAXED_EXP_CAP: f64 = 60.0;

pub(crate) fn check_binary<T: Element>(op: &'static str, mask: &Tensor<T>) -> Result<()> {
    if mask.data().iter().all(|&m| m == T::zero() || m == T::one()) {
        Ok(())
    } else {
        Err(TensorError::NonBinaryMask { op })
    }
}

pub(crate) fn gelu<T: Element>(x: T) -> T {
    let c: T = lit(GELU_C);
    let a: T = lit(GELU_A);
    let half: T = lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Element>(x: T) -> T {
    let c: T = lit(GELU_C);
    let a: T = lit(GELU_A);
    let half: T = lit(0.5);
    let three: T = lit(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Applies `f(a, b)` elementwise with broadcasting.
pub(crate) fn broadcast_binary<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape = shape::broadcast_shape(op, a.shape(), b.shape())?;
    let n = numel(&out_shape);
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = match (shape::layout_for(&out_shape, a.shape()), shape::layout_for(&out_shape, b.shape())) {
        (Layout::Same, Layout::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (Layout::Same, Layout::Repeat(p)) => ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % p])).collect(),
        (Layout::Repeat(p), Layout::Same) => bd.iter().enumerate().map(|(i, &y)| f(ad[i % p], y)).collect(),
        (la, lb) => {
            let ia = offsets(la, &out_shape, a.shape());
            let ib = offsets(lb, &out_shape, b.shape());
            (0..n).map(|i| f(ad[ia[i]], bd[ib[i]])).collect()
        }
    };
    Tensor::from_vec(&out_shape, data)
}

fn offsets(layout: Layout, out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    match layout {
        Layout::Same => (0..numel(out_shape)).collect(),
        Layout::Repeat(p) => (0..numel(out_shape)).map(|i| i % p).collect(),
        Layout::Offsets(o) => {
            let _ = in_shape;
            o
        }
    }
}

impl<'g, T: Element> Var<'g, T> {
    fn record(self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<Var<'g, T>> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|&i| self.graph.requires_grad(i));
        Ok(self.graph.push(value, op, rg))
    }

    fn same_graph(&self, other: &Var<'_, T>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let v = broadcast_binary("add", &self.value(), &other.value(), |x, y| x + y)?;
        self.record("add", v, Op::Add { a: self.id, b: other.id }, &[self.id, other.id])
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let v = broadcast_binary("sub", &self.value(), &other.value(), |x, y| x - y)?;
        self.record("sub", v, Op::Sub { a: self.id, b: other.id }, &[self.id, other.id])
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let v = broadcast_binary("mul", &self.value(), &other.value(), |x, y| x * y)?;
        self.record("mul", v, Op::Mul { a: self.id, b: other.id }, &[self.id, other.id])
    }

    pub fn scale(self, c: f64) -> Result<Var<'g, T>> {
        let c: T = lit(c);
        let v = self.value().map(|x| x * c);
        self.record("scale", v, Op::Scale { a: self.id, c }, &[self.id])
    }

    pub fn neg(self) -> Result<Var<'g, T>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g, T>> {
        let c: T = lit(c);
        let v = self.value().map(|x| x + c);
        self.record("add_scalar", v, Op::AddScalar { a: self.id }, &[self.id])
    }

    /// Matrix product over the last two axes.
    ///
    /// A rank-2 right operand is shared across all leading axes of `self`;
    /// otherwise both operands must have identical leading (batch) axes.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let batched = sb.len() > 2;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); numel(&out_shape)];
        if batched {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(TensorError::shape("matmul", sa, sb));
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        } else {
            let rows = a.numel() / k.max(1);
            T::gemm(rows, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut out);
        }
        let v = Tensor::from_vec(&out_shape, out)?;
        self.record("matmul", v, Op::MatMul { a: self.id, b: other.id, batched }, &[self.id, other.id])
    }

    pub fn exp(self) -> Result<Var<'g, T>> {
        let v = self.value().map(|x| x.exp());
        self.record("exp", v, Op::Exp { a: self.id }, &[self.id])
    }

    pub fn log(self) -> Result<Var<'g, T>> {
        let v = self.value().map(|x| x.ln());
        self.record("log", v, Op::Log { a: self.id }, &[self.id])
    }

    pub fn sigmoid(self) -> Result<Var<'g, T>> {
        let v = self.value().map(sigmoid);
        self.record("sigmoid", v, Op::Sigmoid { a: self.id }, &[self.id])
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'g, T>> {
        let v = self.value().map(gelu);
        self.record("gelu", v, Op::Gelu { a: self.id }, &[self.id])
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(self) -> Result<Var<'g, T>> {
        let v = self.value().map(softplus);
        self.record("softplus", v, Op::Softplus { a: self.id }, &[self.id])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the input lies outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'g, T>> {
        let (lo, hi): (T, T) = (lit(lo), lit(hi));
        let v = self.value().map(|x| x.max(lo).min(hi));
        self.record("clamp", v, Op::Clamp { a: self.id, lo, hi }, &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = (*self.value()).clone().reshaped(shape)?;
        self.record("reshape", v, Op::Reshape { a: self.id }, &[self.id])
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        let out_shape = shape::permuted_shape(a.shape(), perm)?;
        let data = shape::permute_data(a.data(), a.shape(), perm);
        let v = Tensor::from_vec(&out_shape, data)?;
        self.record("permute", v, Op::Permute { a: self.id, perm: perm.to_vec() }, &[self.id])
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(TensorError::invalid("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        let out = shape::broadcast_shape("broadcast_to", a.shape(), shape)?;
        if out != shape {
            return Err(TensorError::shape("broadcast_to", a.shape(), shape));
        }
        let offs = shape::broadcast_offsets(shape, a.shape());
        let data = offs.iter().map(|&o| a.data()[o]).collect();
        let v = Tensor::from_vec(shape, data)?;
        self.record("broadcast_to", v, Op::BroadcastTo { a: self.id }, &[self.id])
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for (p, v) in parts.iter().zip(&values) {
            first.same_graph(p);
            let s = v.shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &x)| d != axis && x != base[d]) {
                return Err(TensorError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = shape::split_at_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let v = Tensor::from_vec(&out_shape, data)?;
        first.record("concat", v, Op::Concat { inputs: ids.clone(), axis }, &ids)
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let a = self.value();
        let s = a.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, dim, inner) = shape::split_at_axis(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut out_shape = s.to_vec();
        out_shape[axis] = len;
        let v = Tensor::from_vec(&out_shape, data)?;
        self.record("slice", v, Op::Slice { a: self.id, axis, start }, &[self.id])
    }

    /// Selects rows (entries of axis 0) by index; duplicates allowed.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        let s = a.shape();
        if s.is_empty() {
            return Err(TensorError::invalid("gather_rows", "scalar input"));
        }
        let inner: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= s[0] {
                return Err(TensorError::invalid("gather_rows", format!("row {r} of {}", s[0])));
            }
            data.extend_from_slice(&a.data()[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = s.to_vec();
        out_shape[0] = rows.len();
        let v = Tensor::from_vec(&out_shape, data)?;
        self.record("gather_rows", v, Op::GatherRows { a: self.id, rows: Rc::new(rows.to_vec()) }, &[self.id])
    }

    pub fn sum_all(self) -> Result<Var<'g, T>> {
        let v = Tensor::scalar(self.value().sum());
        self.record("sum_all", v, Op::SumAll { a: self.id }, &[self.id])
    }

    pub fn mean_all(self) -> Result<Var<'g, T>> {
        let n = self.numel();
        self.sum_all()?.scale(1.0 / n as f64)
    }

    fn reduce_axis(&self, axis: usize) -> Result<(Tensor<T>, usize)> {
        let a = self.value();
        let s = a.shape();
        if axis >= s.len() {
            return Err(TensorError::invalid("reduce", format!("axis {axis} for rank {}", s.len())));
        }
        let (outer, dim, inner) = shape::split_at_axis(s, axis);
        // Accumulate in f64 so 32-bit reductions stay within a few ulp.
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &a.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &x) in acc[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += x.as_f64();
                }
            }
        }
        let out = acc.into_iter().map(T::from_f64).collect();
        let mut out_shape = s.to_vec();
        out_shape.remove(axis);
        Ok((Tensor::from_vec(&out_shape, out)?, dim))
    }

    /// Sum over one axis (the axis is removed).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let (v, _) = self.reduce_axis(axis)?;
        self.record("sum_axis", v, Op::SumAxis { a: self.id, axis }, &[self.id])
    }

    /// Mean over one axis (the axis is removed).
    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let (mut v, dim) = self.reduce_axis(axis)?;
        let n: T = lit(dim as f64);
        for x in v.data_mut() {
            *x = *x / n;
        }
        self.record("mean_axis", v, Op::MeanAxis { a: self.id, axis }, &[self.id])
    }

    /// Mean over `axis` counting only entries whose binary mask is 1.
    ///
    /// `mask` has the shape of `self` truncated after `axis`, and is
    /// broadcast over the trailing axes. A group with no retained entries
    /// yields zeros. The mask itself is differentiable.
    pub fn masked_mean(self, mask: Var<'g, T>, axis: usize) -> Result<Var<'g, T>> {
        self.same_graph(&mask);
        let x = self.value();
        let m = mask.value();
        let s = x.shape();
        if axis >= s.len() || m.shape() != &s[..=axis] {
            return Err(TensorError::shape("masked_mean", s, m.shape()));
        }
        check_binary("masked_mean", &m)?;
        let (outer, dim, inner) = shape::split_at_axis(s, axis);
        let mut out = vec![T::zero(); outer * inner];
        let mut counts = vec![T::zero(); outer];
        let mut acc = vec![0.0f64; inner];
        for o in 0..outer {
            acc.fill(0.0);
            for d in 0..dim {
                let w = m.data()[o * dim + d];
                counts[o] = counts[o] + w;
                if w == T::zero() {
                    continue;
                }
                let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (a, &v) in acc.iter_mut().zip(src) {
                    *a += v.as_f64();
                }
            }
            if counts[o] > T::zero() {
                for (dst, &a) in out[o * inner..(o + 1) * inner].iter_mut().zip(&acc) {
                    *dst = T::from_f64(a) / counts[o];
                }
            }
        }
        let mut out_shape = s.to_vec();
        out_shape.remove(axis);
        let v = Tensor::from_vec(&out_shape, out)?;
        self.record(
            "masked_mean",
            v,
            Op::MaskedMean { x: self.id, mask: mask.id, axis, counts: Rc::new(counts) },
            &[self.id, mask.id],
        )
    }

    /// Mean of the rows of a `[R, F]` input grouped by `segments[r]`, giving
    /// `[num_segments, F]`; empty segments are zero.
    pub fn segment_mean(self, segments: &[usize], num_segments: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || segments.len() != s[0] {
            return Err(TensorError::invalid("segment_mean", format!("{} segments for {s:?}", segments.len())));
        }
        let f = s[1];
        let mut out = vec![T::zero(); num_segments * f];
        let mut counts = vec![T::zero(); num_segments];
        for (r, &seg) in segments.iter().enumerate() {
            if seg >= num_segments {
                return Err(TensorError::invalid("segment_mean", format!("segment {seg} of {num_segments}")));
            }
            counts[seg] = counts[seg] + T::one();
            for (a, &v) in out[seg * f..(seg + 1) * f].iter_mut().zip(&x.data()[r * f..(r + 1) * f]) {
                *a = *a + v;
            }
        }
        for (seg, &c) in counts.iter().enumerate() {
            if c > T::zero() {
                for a in &mut out[seg * f..(seg + 1) * f] {
                    *a = *a / c;
                }
            }
        }
        let v = Tensor::from_vec(&[num_segments, f], out)?;
        self.record(
            "segment_mean",
            v,
            Op::SegmentMean { x: self.id, segments: Rc::new(segments.to_vec()), counts: Rc::new(counts) },
            &[self.id],
        )
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax(self) -> Result<Var<'g, T>> {
        let a = self.value();
        let c = *a.shape().last().ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z = z + *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        let v = Tensor::from_vec(a.shape(), out)?;
        self.record("softmax", v, Op::Softmax { a: self.id }, &[self.id])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'g, T>> {
        let a = self.value();
        let c = *a.shape().last().ok_or_else(|| TensorError::invalid("log_softmax", "scalar input"))?;
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        let v = Tensor::from_vec(a.shape(), out)?;
        self.record("log_softmax", v, Op::LogSoftmax { a: self.id }, &[self.id])
    }

    /// Attention normalisation with a column mask.
    ///
    /// `self` holds scores of shape `[.., C, C]`, `mask` has shape `[C]`, or
    /// `[B, C]` with `B` the leading axis of the scores (one mask per sample).
    /// The effective mask is `M[i][j] = 1` on the diagonal and `mask[j]`
    /// elsewhere; each row is `exp(S) * M` renormalised over the row. The
    /// row maximum is taken over unmasked entries only.
    pub fn masked_softmax(self, mask: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&mask);
        let s = self.value();
        let m = mask.value();
        let sh = s.shape();
        if sh.len() < 2 || sh[sh.len() - 1] != sh[sh.len() - 2] {
            return Err(TensorError::shape("masked_softmax", sh, m.shape()));
        }
        let c = sh[sh.len() - 1];
        let per_sample = match m.shape() {
            [n] if *n == c => false,
            [b, n] if *n == c && sh.len() >= 3 && *b == sh[0] => true,
            _ => return Err(TensorError::shape("masked_softmax", sh, m.shape())),
        };
        check_binary("masked_softmax", &m)?;
        let rows_per_mask = if per_sample { s.numel() / c / sh[0] } else { s.numel() / c };
        let cap: T = lit(RELAXED_EXP_CAP);
        let mut out = vec![T::zero(); s.numel()];
        let track = mask.requires_grad();
        let mut relaxed = if track { vec![T::zero(); s.numel()] } else { Vec::new() };
        for (r, row) in s.data().chunks(c).enumerate() {
            let i = r % c;
            let md = &m.data()[(r / rows_per_mask) * c..][..c];
            let on = |j: usize| j == i || md[j] != T::zero();
            let mx = (0..c).filter(|&j| on(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
            let o = &mut out[r * c..(r + 1) * c];
            let mut z = T::zero();
            for j in 0..c {
                if on(j) {
                    o[j] = (row[j] - mx).exp();
                    z = z + o[j];
                }
            }
            for x in o.iter_mut() {
                *x = *x / z;
            }
            if track {
                let p = &mut relaxed[r * c..(r + 1) * c];
                for j in 0..c {
                    p[j] = if on(j) { o[j] } else { (row[j] - mx).min(cap).exp() / z };
                }
            }
        }
        let v = Tensor::from_vec(sh, out)?;
        let relaxed = Rc::new(if track { Tensor::from_vec(sh, relaxed)? } else { Tensor::zeros(&[0]) });
        self.record(
            "masked_softmax",
            v,
            Op::MaskedSoftmax { s: self.id, mask: mask.id, relaxed },
            &[self.id, mask.id],
        )
    }

    /// LayerNorm over the last axis followed by the affine `gamma * x + beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        self.same_graph(&gamma);
        self.same_graph(&beta);
        let x = self.value();
        let (g, b) = (gamma.value(), beta.value());
        let f = *x.shape().last().ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
        if g.shape() != [f] || b.shape() != [f] {
            return Err(TensorError::shape("layer_norm", x.shape(), g.shape()));
        }
        let eps: T = lit(eps);
        let nf: T = lit(f as f64);
        let rows = x.numel() / f.max(1);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * f..(r + 1) * f];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..f {
                let h = (row[j] - mean) * rs;
                xhat[r * f + j] = h;
                out[r * f + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let v = Tensor::from_vec(x.shape(), out)?;
        let xhat = Tensor::from_vec(x.shape(), xhat)?;
        self.record(
            "layer_norm",
            v,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: Rc::new(xhat),
                rstd: Rc::new(rstd),
            },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// Straight-through estimator: the forward value is `hard`, the backward
    /// pass routes the incoming gradient unchanged to `self`.
    pub fn straight_through(self, hard: Tensor<T>) -> Result<Var<'g, T>> {
        if hard.shape() != self.shape().as_slice() {
            return Err(TensorError::shape("straight_through", &self.shape(), hard.shape()));
        }
        self.record("straight_through", hard, Op::StraightThrough { soft: self.id }, &[self.id])
    }

    /// Forward-only copy of the value, detached from the tape.
    pub fn detach(self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }
}

