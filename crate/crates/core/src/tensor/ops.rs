//! Elementwise, reduction, normalisation and shape ops with their VJPs.
//!
//! Binary elementwise ops broadcast only over leading dimensions: the
//! smaller operand's shape must equal a suffix of the larger one's (a
//! scalar is the empty suffix). Every reduction runs sequentially over its
//! axis in index order.

use std::sync::Arc;

use super::{split_axis, strides_of, Tape, Tensor, Var};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::Axis { op, axis, rank });
    }
    Ok(())
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::shape(op, a, b))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Permutes a dense array; `perm[i]` names the input axis placed at output axis `i`.
pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    if rank == 0 {
        out.push(data[0]);
        return (out, out_shape);
    }
    // Odometer over output indices, innermost axis copied in a tight loop.
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return (out, out_shape);
            }
            axis -= 1;
            idx[axis] += 1;
            base += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<'t> Var<'t> {
    fn unary(
        self,
        op: &'static str,
        check: bool,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.map(f);
        if check && !y.is_finite() && x.is_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(self.tape.record(
            &[self],
            y,
            Box::new(move |g, y, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data).expect("same shape"))]
            }),
        ))
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shape(op, a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (na, nb) = (a.len().max(1), b.len().max(1));
        let data: Vec<f64> = (0..n).map(|i| f(a.data()[i % na], b.data()[i % nb])).collect();
        let y = Tensor::new(shape, data)?;
        if !y.is_finite() && a.is_finite() && b.is_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(self.tape.record(
            &[self, other],
            y,
            Box::new(move |g, _, needs| {
                let grad = |d: &dyn Fn(f64, f64) -> f64, target: &Tensor| {
                    let nt = target.len().max(1);
                    let mut out = vec![0.0; target.len()];
                    for (i, gv) in g.data().iter().enumerate() {
                        out[i % nt] += gv * d(a.data()[i % na], b.data()[i % nb]);
                    }
                    Tensor::new(target.shape().to_vec(), out).expect("operand shape")
                };
                vec![
                    needs[0].then(|| grad(&da, &a)),
                    needs[1].then(|| grad(&db, &b)),
                ]
            }),
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", true, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", true, move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", true, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", false, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", false, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", true, f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary("ln", true, f64::ln, |x, _| 1.0 / x)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary("softplus", false, softplus, |x, _| sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary("gelu", false, gelu, |x, _| gelu_grad(x))
    }

    fn reduce_axis(self, axis: usize, op: &'static str, mean: bool) -> Result<Var<'t>> {
        let x = self.value();
        check_axis(op, axis, x.rank())?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        if len == 0 {
            return Err(Error::EmptyReduction { op });
        }
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0;
                for l in 0..len {
                    acc += x.data()[(o * len + l) * inner + i];
                }
                out[o * inner + i] = acc * scale;
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record(
            &[self],
            Tensor::new(shape, out)?,
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] = g.data()[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(Tensor::new(in_shape.clone(), gx).expect("input shape"))]
            }),
        ))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, "sum_axis", false)
    }

    /// Arithmetic mean over `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, "mean_axis", true)
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let x = self.value();
        let total = x.sum();
        let shape = x.shape().to_vec();
        Ok(self.tape.record(
            &[self],
            Tensor::scalar(total),
            Box::new(move |g, _, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))]),
        ))
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = self.value().len();
        if n == 0 {
            return Err(Error::EmptyReduction { op: "mean_all" });
        }
        self.sum_all()?.scale(1.0 / n as f64)
    }

    fn softmax_impl(self, axis: usize, zero_degenerate: bool) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("softmax", axis, x.rank())?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        if len == 0 {
            return Err(Error::EmptyReduction { op: "softmax" });
        }
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(x.data()[at(l)]);
                }
                if max == f64::NEG_INFINITY {
                    if zero_degenerate {
                        continue;
                    }
                    return Err(Error::DegenerateSoftmax { slice: o * inner + i });
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (x.data()[at(l)] - max).exp();
                    y[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    y[at(l)] /= sum;
                }
            }
        }
        let y = Tensor::new(x.shape().to_vec(), y)?;
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        Ok(self.tape.record(
            &[self],
            y,
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut dot = 0.0;
                        for l in 0..len {
                            dot += g.data()[at(l)] * y.data()[at(l)];
                        }
                        for l in 0..len {
                            gx[at(l)] = y.data()[at(l)] * (g.data()[at(l)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), gx).expect("same shape"))]
            }),
        ))
    }

    /// Numerically stable softmax along `axis`. Entries equal to `-inf` map
    /// to exactly 0; a slice that is entirely `-inf` is an error.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, false)
    }

    /// As [`Var::softmax`], but an all `-inf` slice yields an all-zero row
    /// (with zero gradient) instead of an error.
    pub fn softmax_or_zero(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, true)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("log_softmax", axis, x.rank())?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        if len == 0 {
            return Err(Error::EmptyReduction { op: "log_softmax" });
        }
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(x.data()[at(l)]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    sum += (x.data()[at(l)] - max).exp();
                }
                let lse = max + sum.ln();
                for l in 0..len {
                    y[at(l)] = x.data()[at(l)] - lse;
                }
            }
        }
        let y = Tensor::new(x.shape().to_vec(), y)?;
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "log_softmax" });
        }
        Ok(self.tape.record(
            &[self],
            y,
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut gsum = 0.0;
                        for l in 0..len {
                            gsum += g.data()[at(l)];
                        }
                        for l in 0..len {
                            gx[at(l)] = g.data()[at(l)] - y.data()[at(l)].exp() * gsum;
                        }
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), gx).expect("same shape"))]
            }),
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let shape = shape.into();
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::shape("reshape", x.shape(), &shape));
        }
        let in_shape = x.shape().to_vec();
        let y = Tensor::new(shape, x.data().to_vec())?;
        Ok(self.tape.record(
            &[self],
            y,
            Box::new(move |g, _, _| vec![Some(g.reshaped(in_shape.clone()).expect("same numel"))]),
        ))
    }

    /// `perm[i]` is the input axis that becomes output axis `i`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() {
            return Err(Error::shape("permute", x.shape(), perm));
        }
        for &p in perm {
            if p >= x.rank() || seen[p] {
                return Err(Error::shape("permute", x.shape(), perm));
            }
            seen[p] = true;
        }
        let (data, shape) = permute_data(x.data(), x.shape(), perm);
        let inv = inverse_perm(perm);
        Ok(self.tape.record(
            &[self],
            Tensor::new(shape, data)?,
            Box::new(move |g, _, _| {
                let (data, shape) = permute_data(g.data(), g.shape(), &inv);
                vec![Some(Tensor::new(shape, data).expect("permuted"))]
            }),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t>> {
        let rank = self.value().rank();
        check_axis("transpose", a.max(b), rank)?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape: &'t Tape = first.tape;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rank = values[0].rank();
        check_axis("concat", axis, rank)?;
        for v in &values[1..] {
            let same = v.rank() == rank
                && (0..rank).all(|d| d == axis || v.shape()[d] == values[0].shape()[d]);
            if !same {
                return Err(Error::shape("concat", values[0].shape(), v.shape()));
            }
        }
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(values[0].shape(), axis);
        let mut shape = values[0].shape().to_vec();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(tape.record(
            parts,
            Tensor::new(shape, out)?,
            Box::new(move |g, _, needs| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(lens.len());
                for ((len, shape), &need) in lens.iter().zip(&shapes).zip(needs) {
                    if need {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gx.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        grads.push(Some(Tensor::new(shape.clone(), gx).expect("part shape")));
                    } else {
                        grads.push(None);
                    }
                    offset += len;
                }
                grads
            }),
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("slice", axis, x.rank())?;
        if start + len > x.shape()[axis] {
            return Err(Error::shape("slice", x.shape(), &[start, len]));
        }
        let (outer, full, inner) = split_axis(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record(
            &[self],
            Tensor::new(shape, out)?,
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(in_shape.clone(), gx).expect("input shape"))]
            }),
        ))
    }

    /// Zero padding along `axis`.
    pub fn pad(self, axis: usize, before: usize, after: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("pad", axis, x.rank())?;
        if before == 0 && after == 0 {
            return Ok(self);
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let full = before + len + after;
        let mut out = vec![0.0; outer * full * inner];
        for o in 0..outer {
            let dst = (o * full + before) * inner;
            out[dst..dst + len * inner].copy_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = full;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record(
            &[self],
            Tensor::new(shape, out)?,
            Box::new(move |g, _, _| {
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = (o * full + before) * inner;
                    gx.extend_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![Some(Tensor::new(in_shape.clone(), gx).expect("input shape"))]
            }),
        ))
    }

    /// Selects `indices` along `axis` (repeats allowed).
    pub fn gather(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("gather", axis, x.rank())?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::shape("gather", x.shape(), &[bad]));
        }
        let k = indices.len();
        let mut out = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                out.extend_from_slice(&x.data()[base..base + inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = k;
        let in_shape = x.shape().to_vec();
        let indices = indices.to_vec();
        Ok(self.tape.record(
            &[self],
            Tensor::new(shape, out)?,
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let dst = (o * len + i) * inner;
                        let src = (o * k + j) * inner;
                        for t in 0..inner {
                            gx[dst + t] += g.data()[src + t];
                        }
                    }
                }
                vec![Some(Tensor::new(in_shape.clone(), gx).expect("input shape"))]
            }),
        ))
    }

    /// Replaces every row (a slice along the last axis) whose `keep` flag is
    /// false with `value`. Replaced rows pass no gradient.
    pub fn fill_rows(self, keep: &[bool], value: f64) -> Result<Var<'t>> {
        let x = self.value();
        let width = *x.shape().last().unwrap_or(&1);
        if width == 0 || keep.len() * width != x.len() {
            return Err(Error::shape("fill_rows", x.shape(), &[keep.len()]));
        }
        let mut y = x.data().to_vec();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                y[r * width..(r + 1) * width].fill(value);
            }
        }
        let keep = keep.to_vec();
        Ok(self.tape.record(
            &[self],
            Tensor::new(x.shape().to_vec(), y)?,
            Box::new(move |g, _, _| {
                let mut gx = g.clone();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        gx.data_mut()[r * width..(r + 1) * width].fill(0.0);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
