use std::borrow::Cow;

use super::broadcast::{broadcast_shape, IndexMap};
use super::gemm::matmul_into;
use super::{Result, Tensor, TensorError, Var};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn expand<'a>(map: &IndexMap, src: &'a [f64], n: usize) -> Cow<'a, [f64]> {
    match map {
        IndexMap::Identity => Cow::Borrowed(src),
        _ => Cow::Owned(map.gather(src, n)),
    }
}

impl Var {
    fn binary(&self, other: &Var, op: &'static str, kind: Binary) -> Result<Var> {
        self.same_tape(other)?;
        let a = self.value();
        let b = other.value();
        let out_shape =
            broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })?;
        let n = numel(&out_shape);
        let ma = IndexMap::new(&out_shape, a.shape());
        let mb = IndexMap::new(&out_shape, b.shape());
        let data: Vec<f64> = {
            let xa = expand(&ma, a.data(), n);
            let xb = expand(&mb, b.data(), n);
            let it = xa.iter().zip(xb.iter());
            match kind {
                Binary::Add => it.map(|(x, y)| x + y).collect(),
                Binary::Sub => it.map(|(x, y)| x - y).collect(),
                Binary::Mul => it.map(|(x, y)| x * y).collect(),
                Binary::Div => it.map(|(x, y)| x / y).collect(),
            }
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(Var::record(op, &[self, other], value, move || {
            Box::new(move |g, needs| {
                let (na, nb) = (a.numel(), b.numel());
                let mut ga = None;
                let mut gb = None;
                match kind {
                    Binary::Add => {
                        if needs[0] {
                            ga = Some(ma.reduce(g, na));
                        }
                        if needs[1] {
                            gb = Some(mb.reduce(g, nb));
                        }
                    }
                    Binary::Sub => {
                        if needs[0] {
                            ga = Some(ma.reduce(g, na));
                        }
                        if needs[1] {
                            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                            gb = Some(mb.reduce(&neg, nb));
                        }
                    }
                    Binary::Mul => {
                        if needs[0] {
                            let xb = expand(&mb, b.data(), n);
                            let t: Vec<f64> = g.iter().zip(xb.iter()).map(|(g, y)| g * y).collect();
                            ga = Some(ma.reduce(&t, na));
                        }
                        if needs[1] {
                            let xa = expand(&ma, a.data(), n);
                            let t: Vec<f64> = g.iter().zip(xa.iter()).map(|(g, x)| g * x).collect();
                            gb = Some(mb.reduce(&t, nb));
                        }
                    }
                    Binary::Div => {
                        let xb = expand(&mb, b.data(), n);
                        if needs[0] {
                            let t: Vec<f64> = g.iter().zip(xb.iter()).map(|(g, y)| g / y).collect();
                            ga = Some(ma.reduce(&t, na));
                        }
                        if needs[1] {
                            let xa = expand(&ma, a.data(), n);
                            let t: Vec<f64> = g
                                .iter()
                                .zip(xa.iter().zip(xb.iter()))
                                .map(|(g, (x, y))| -g * x / (y * y))
                                .collect();
                            gb = Some(mb.reduce(&t, nb));
                        }
                    }
                }
                vec![ga, gb]
            })
        }))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", Binary::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", Binary::Sub)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", Binary::Mul)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, "div", Binary::Div)
    }

    /// Elementwise map with derivative `df(x)` evaluated at the input.
    fn unary(&self, op: &'static str, f: impl Fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let x = self.value();
        let value = x.map(f);
        Var::record(op, &[self], value, move || {
            let d: Vec<f64> = x.data().iter().map(|&v| df(v)).collect();
            Box::new(move |g, _| vec![Some(g.iter().zip(&d).map(|(g, d)| g * d).collect())])
        })
    }

    pub fn neg(&self) -> Var {
        self.unary("neg", |x| -x, |_| -1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        let x = self.value();
        Var::record("scale", &[self], x.map(|v| v * c), move || {
            Box::new(move |g, _| vec![Some(g.iter().map(|g| g * c).collect())])
        })
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let x = self.value();
        Var::record("add_scalar", &[self], x.map(|v| v + c), move || {
            Box::new(move |g, _| vec![Some(g.to_vec())])
        })
    }

    /// Absolute value; the subgradient at exactly zero is 0.
    pub fn abs(&self) -> Var {
        self.unary("abs", f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Var {
        self.unary("square", |x| x * x, |x| 2.0 * x)
    }

    pub fn sqrt(&self) -> Var {
        self.unary("sqrt", f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn rsqrt(&self) -> Var {
        self.unary("rsqrt", |x| 1.0 / x.sqrt(), |x| -0.5 / (x * x.sqrt()))
    }

    pub fn exp(&self) -> Var {
        self.unary("exp", f64::exp, f64::exp)
    }

    pub fn silu(&self) -> Var {
        self.unary("silu", |x| x * sigmoid(x), |x| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        self.unary("gelu", gelu, |x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        })
    }

    /// 2-D product `[m,k] · [k,n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(m, k, n, (a.data(), k as isize, 1), (b.data(), n as isize, 1), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(Var::record("matmul", &[self, other], value, move || {
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    // g[m,n] · bᵀ[n,k]
                    let mut ga = vec![0.0; m * k];
                    matmul_into(m, n, k, (g, n as isize, 1), (b.data(), 1, n as isize), &mut ga);
                    ga
                });
                let gb = needs[1].then(|| {
                    // aᵀ[k,m] · g[m,n]
                    let mut gb = vec![0.0; k * n];
                    matmul_into(k, m, n, (a.data(), 1, k as isize), (g, n as isize, 1), &mut gb);
                    gb
                });
                vec![ga, gb]
            })
        }))
    }

    /// Affine map over the last axis: `x[..., i] · w[i, o] + b[o]`.
    pub fn linear(&self, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let shape = self.shape();
        let ws = weight.shape();
        let din = *shape.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != din {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: ws,
            });
        }
        let rows = numel(&shape) / din.max(1);
        let mut y = self.reshape(&[rows, din])?.matmul(weight)?;
        if let Some(b) = bias {
            y = y.add(b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = ws[1];
        y.reshape(&out_shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let x = self.value();
        let value = (*x).clone().reshape(shape)?;
        Ok(Var::record("reshape", &[self], value, || {
            Box::new(|g, _| vec![Some(g.to_vec())])
        }))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        let x = self.value();
        if broadcast_shape(x.shape(), shape).as_deref() != Some(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let map = IndexMap::new(shape, x.shape());
        let n = numel(shape);
        let value = Tensor::new(shape.to_vec(), map.gather(x.data(), n))?;
        let src_n = x.numel();
        Ok(Var::record("broadcast_to", &[self], value, move || {
            Box::new(move |g, _| vec![Some(map.reduce(g, src_n))])
        }))
    }

    /// Sum over `axes`; reduced axes are kept with extent 1 when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(TensorError::Invalid {
                op: "sum_axes",
                msg: format!("axis {bad} out of range for shape {shape:?}"),
            });
        }
        let keep: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let map = IndexMap::new(&shape, &keep);
        let out = map.reduce(x.data(), numel(&keep));
        let out_shape: Vec<usize> = if keepdim {
            keep
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let value = Tensor::new(out_shape, out)?;
        let n = numel(&shape);
        Ok(Var::record("sum_axes", &[self], value, move || {
            Box::new(move |g, _| vec![Some(map.gather(g, n))])
        }))
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes, keepdim)?.scale(1.0 / count.max(1) as f64))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Var {
        let x = self.value();
        let n = x.numel();
        let total: f64 = x.data().iter().sum();
        Var::record("sum", &[self], Tensor::scalar(total), move || {
            Box::new(move |g, _| vec![Some(vec![g[0]; n])])
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no operands".into(),
        })?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total_w: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total_w);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let value = Tensor::new(shape, data)?;
        Ok(Var::record("concat", parts, value, move || {
            Box::new(move |g, needs| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let start = offset;
                        offset += w;
                        need.then(|| {
                            let mut out = Vec::with_capacity(outer * w);
                            for o in 0..outer {
                                let row = o * total_w + start;
                                out.extend_from_slice(&g[row..row + w]);
                            }
                            out
                        })
                    })
                    .collect()
            })
        }))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let row = shape[axis] * inner;
        let (lo, w) = (start * inner, len * inner);
        let mut data = Vec::with_capacity(outer * w);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[o * row + lo..o * row + lo + w]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        let n = x.numel();
        Ok(Var::record("slice", &[self], value, move || {
            Box::new(move |g, _| {
                let mut out = vec![0.0; n];
                for o in 0..outer {
                    out[o * row + lo..o * row + lo + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![Some(out)]
            })
        }))
    }

    /// Circular shift along `axis`: `out[i] = x[(i - shift) mod n]`.
    pub fn roll(&self, axis: usize, shift: isize) -> Result<Var> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "roll",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let value = Tensor::new(shape.clone(), roll_data(x.data(), &shape, axis, shift))?;
        Ok(Var::record("roll", &[self], value, move || {
            Box::new(move |g, _| vec![Some(roll_data(g, &shape, axis, -shift))])
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            });
        }
        let table = permute_table(&shape, perm);
        let data: Vec<f64> = table.iter().map(|&j| x.data()[j]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(out_shape, data)?;
        let n = x.numel();
        Ok(Var::record("permute", &[self], value, move || {
            Box::new(move |g, _| {
                let mut out = vec![0.0; n];
                for (gi, &j) in g.iter().zip(&table) {
                    out[j] = *gi;
                }
                vec![Some(out)]
            })
        }))
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias` of
    /// extent equal to that axis; `eps` sits inside the square root.
    pub fn layer_norm(&self, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(Var::record("layer_norm", &[self, gain, bias], value, move || {
            Box::new(move |g, needs| {
                let gain = gv.data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gain[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gain[j];
                            gx[r * d + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    gx
                });
                let gg = needs[1].then(|| {
                    let mut gg = vec![0.0; d];
                    for (i, (gi, hi)) in g.iter().zip(&xhat).enumerate() {
                        gg[i % d] += gi * hi;
                    }
                    gg
                });
                let gb = needs[2].then(|| {
                    let mut gb = vec![0.0; d];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                    gb
                });
                vec![gx, gg, gb]
            })
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var> {
        let x = self.value();
        let d = *x.shape().last().ok_or(TensorError::Invalid {
            op: "softmax",
            msg: "scalar input".into(),
        })?;
        let mut y = vec![0.0; x.numel()];
        for (xr, yr) in x.data().chunks(d).zip(y.chunks_mut(d)) {
            let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = (v - max).exp();
                z += *o;
            }
            yr.iter_mut().for_each(|o| *o /= z);
        }
        let value = Tensor::new(x.shape().to_vec(), y.clone())?;
        Ok(Var::record("softmax", &[self], value, move || {
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(gx)]
            })
        }))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn roll_data(x: &[f64], shape: &[usize], axis: usize, shift: isize) -> Vec<f64> {
    let n = shape[axis];
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    let s = shift.rem_euclid(n.max(1) as isize) as usize;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..n {
            let j = (i + s) % n;
            out[base + j * inner..base + (j + 1) * inner]
                .copy_from_slice(&x[base + i * inner..base + (i + 1) * inner]);
        }
    }
    out
}

/// Source offset of every element of `x.permute(perm)` in row-major `x`.
pub(crate) fn permute_table(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n = numel(shape);
    let mut res = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        res.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    res
}
