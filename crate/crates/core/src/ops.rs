//! Differentiable operations recorded on a [`Tape`](crate::autodiff::Tape).

use crate::autodiff::Var;
use crate::conv::{ConvGeometry, KernelLayout, Plan};
use crate::error::{PvcError, Result};
use crate::tensor::{shape5, Tensor};
use std::rc::Rc;

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(PvcError::dim(op, format!("operand shapes differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Logistic function kept strictly inside (0, 1): f64 rounding would
/// otherwise saturate to exactly 1 beyond |v| ~ 37.
pub(crate) fn sigmoid(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

impl<'t> Var<'t> {
    fn unary(
        self,
        op: &'static str,
        value: Tensor,
        backward: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var<'t> {
        self.tape
            .record(op, value, &[self], Box::new(move |g, _| vec![Some(backward(g))]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.rc(), other.rc());
        same_shape("add", a.shape(), b.shape())?;
        let out = zip_map(&a, &b, |x, y| x + y);
        Ok(self.tape.record(
            "add",
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.rc(), other.rc());
        same_shape("sub", a.shape(), b.shape())?;
        let out = zip_map(&a, &b, |x, y| x - y);
        Ok(self.tape.record(
            "sub",
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.rc(), other.rc());
        same_shape("mul", a.shape(), b.shape())?;
        let out = zip_map(&a, &b, |x, y| x * y);
        Ok(self.tape.record(
            "mul",
            out,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| zip_map(g, &b, |gv, y| gv * y)),
                    needs[1].then(|| zip_map(g, &a, |gv, x| gv * x)),
                ]
            }),
        ))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.rc(), other.rc());
        same_shape("div", a.shape(), b.shape())?;
        let out = zip_map(&a, &b, |x, y| x / y);
        Ok(self.tape.record(
            "div",
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| zip_map(g, &b, |gv, y| gv / y));
                let gb = needs[1].then(|| {
                    let t = zip_map(g, &a, |gv, x| gv * x);
                    zip_map(&t, &b, |v, y| -v / (y * y))
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scalar_mul(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.unary("scalar_mul", out, move |g| g.map(|v| v * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.unary("add_scalar", out, |g| g.clone())
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.rc();
        let out = x.map(|v| v.max(0.0));
        self.unary("relu", out, move |g| {
            zip_map(g, &x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = Rc::new(self.value().map(sigmoid));
        let y = Rc::clone(&out);
        self.tape.record(
            "sigmoid",
            Rc::unwrap_or_clone(out),
            &[self],
            Box::new(move |g, _| vec![Some(zip_map(g, &y, |gv, s| gv * s * (1.0 - s)))]),
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow; derivative `sigmoid(x)`.
    pub fn softplus(self) -> Var<'t> {
        let x = self.rc();
        let out = x.map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.unary("softplus", out, move |g| zip_map(g, &x, |gv, xv| gv * sigmoid(xv)))
    }

    pub fn abs(self) -> Var<'t> {
        let x = self.rc();
        let out = x.map(f64::abs);
        self.unary("abs", out, move |g| zip_map(g, &x, |gv, xv| gv * sign(xv)))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(self) -> Var<'t> {
        let shape = self.shape();
        let out = Tensor::scalar(self.value().sum());
        self.unary("sum", out, move |g| Tensor::full(&shape, g.data()[0]))
    }

    pub fn mean(self) -> Var<'t> {
        let shape = self.shape();
        let n = self.value().len() as f64;
        let out = Tensor::scalar(self.value().sum() / n);
        self.unary("mean", out, move |g| Tensor::full(&shape, g.data()[0] / n))
    }

    /// `[N, C, D, H, W] -> [N, C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let x = self.rc();
        let [n, c, d, h, w] = shape5("global_avg_pool", x.shape())?;
        let vol = d * h * w;
        let out: Vec<f64> = x
            .data()
            .chunks(vol)
            .map(|ch| ch.iter().sum::<f64>() / vol as f64)
            .collect();
        let in_shape = x.shape().to_vec();
        Ok(self.unary("global_avg_pool", Tensor::from_parts(vec![n, c], out), move |g| {
            let mut data = Vec::with_capacity(n * c * vol);
            for &gv in g.data() {
                data.extend(std::iter::repeat_n(gv / vol as f64, vol));
            }
            Tensor::from_parts(in_shape.clone(), data)
        }))
    }

    /// `[M, K] x [K, P] -> [M, P]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.rc(), other.rc());
        let (&[m, k], &[k2, p]) = (a.shape(), b.shape()) else {
            return Err(PvcError::dim("matmul", format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape())));
        };
        if k != k2 {
            return Err(PvcError::dim("matmul", format!("inner extents differ: {k} vs {k2}")));
        }
        let out = matmul_raw(a.data(), b.data(), m, k, p);
        Ok(self.tape.record(
            "matmul",
            Tensor::from_parts(vec![m, p], out),
            &[self, other],
            Box::new(move |g, needs| {
                // dA = G B^T, dB = A^T G
                let ga = needs[0].then(|| {
                    let bt = transpose_raw(b.data(), k, p);
                    Tensor::from_parts(vec![m, k], matmul_raw(g.data(), &bt, m, p, k))
                });
                let gb = needs[1].then(|| {
                    let at = transpose_raw(a.data(), m, k);
                    Tensor::from_parts(vec![k, p], matmul_raw(&at, g.data(), k, m, p))
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Fully connected layer: `x [N, K]`, `weight [M, K]`, `bias [M]` -> `[N, M]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, w, b) = (self.rc(), weight.rc(), bias.rc());
        let (&[n, k], &[m, k2]) = (x.shape(), w.shape()) else {
            return Err(PvcError::dim("linear", format!("expected x [N,K] and weight [M,K], got {:?} and {:?}", x.shape(), w.shape())));
        };
        if k != k2 {
            return Err(PvcError::dim("linear", format!("input features {k} but weight expects {k2}")));
        }
        if b.shape() != [m] {
            return Err(PvcError::dim("linear", format!("bias shape {:?}, expected [{m}]", b.shape())));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xi = &x.data()[i * k..(i + 1) * k];
            for j in 0..m {
                let wj = &w.data()[j * k..(j + 1) * k];
                out[i * m + j] = xi.iter().zip(wj).map(|(a, b)| a * b).sum::<f64>() + b.data()[j];
            }
        }
        Ok(self.tape.record(
            "linear",
            Tensor::from_parts(vec![n, m], out),
            &[self, weight, bias],
            Box::new(move |g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| Tensor::from_parts(vec![n, k], matmul_raw(gd, w.data(), n, m, k)));
                let gw = needs[1].then(|| {
                    let gt = transpose_raw(gd, n, m);
                    Tensor::from_parts(vec![m, k], matmul_raw(&gt, x.data(), m, n, k))
                });
                let gb = needs[2].then(|| {
                    let mut s = vec![0.0; m];
                    for row in gd.chunks(m) {
                        for (a, v) in s.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_parts(vec![m], s)
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| PvcError::dim("concat", "no operands"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.rc()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(PvcError::dim("concat", format!("axis {axis} out of range for rank {}", base.len())));
        }
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(PvcError::dim("concat", format!("shape {s:?} incompatible with {base:?} along axis {axis}")));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total_axis: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (v, &wd) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total_axis;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(tape.record(
            "concat",
            Tensor::from_parts(shape, data),
            parts,
            Box::new(move |g, needs| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &wd) in widths.iter().enumerate() {
                    if needs[i] {
                        let mut d = Vec::with_capacity(outer * wd);
                        for o in 0..outer {
                            let start = o * row + offset;
                            d.extend_from_slice(&g.data()[start..start + wd]);
                        }
                        grads.push(Some(Tensor::from_parts(shapes[i].clone(), d)));
                    } else {
                        grads.push(None);
                    }
                    offset += wd;
                }
                grads
            }),
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.rc();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(PvcError::dim("slice", format!("range {start}..{} invalid for axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = o * full + start * inner;
            data.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.unary("slice", Tensor::from_parts(out_shape, data), move |g| {
            let mut d = vec![0.0; outer * full];
            for o in 0..outer {
                let s = o * full + start * inner;
                d[s..s + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            Tensor::from_parts(shape.clone(), d)
        }))
    }

    /// Centre-aligns a `[N, C, D, H, W]` tensor to new spatial extents,
    /// cropping axes that shrink and zero-padding axes that grow.
    pub fn center_fit(self, target: [usize; 3]) -> Result<Var<'t>> {
        let x = self.rc();
        let [n, c, d, h, w] = shape5("center_fit", x.shape())?;
        if target.contains(&0) {
            return Err(PvcError::dim("center_fit", "target extents must be positive"));
        }
        let src = [d, h, w];
        if src == target {
            return Ok(self);
        }
        // source index = target index + off
        let off: [isize; 3] = std::array::from_fn(|i| (src[i] as isize - target[i] as isize) / 2);
        let map = WindowMap { src, dst: target, off };
        let out = map.apply(x.data(), n * c);
        let in_shape = x.shape().to_vec();
        Ok(self.unary(
            "center_fit",
            Tensor::from_parts(vec![n, c, target[0], target[1], target[2]], out),
            move |g| Tensor::from_parts(in_shape.clone(), map.adjoint(g.data(), n * c)),
        ))
    }

    /// Matches the channel count of a `[N, C, ...]` tensor to `channels`:
    /// identity when equal, otherwise the channel mean replicated.
    pub fn fit_channels(self, channels: usize) -> Result<Var<'t>> {
        let x = self.rc();
        let shape = x.shape().to_vec();
        if shape.len() < 2 || channels == 0 {
            return Err(PvcError::dim("fit_channels", format!("cannot fit {shape:?} to {channels} channels")));
        }
        let (n, c) = (shape[0], shape[1]);
        if c == channels {
            return Ok(self);
        }
        let vol: usize = shape[2..].iter().product();
        let mut out = Vec::with_capacity(n * channels * vol);
        for item in x.data().chunks(c * vol) {
            let mut mean = vec![0.0; vol];
            for ch in item.chunks(vol) {
                for (m, v) in mean.iter_mut().zip(ch) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= c as f64);
            for _ in 0..channels {
                out.extend_from_slice(&mean);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[1] = channels;
        Ok(self.unary("fit_channels", Tensor::from_parts(out_shape, out), move |g| {
            let mut d = Vec::with_capacity(n * c * vol);
            for item in g.data().chunks(channels * vol) {
                let mut acc = vec![0.0; vol];
                for ch in item.chunks(vol) {
                    for (a, v) in acc.iter_mut().zip(ch) {
                        *a += v;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= c as f64);
                for _ in 0..c {
                    d.extend_from_slice(&acc);
                }
            }
            Tensor::from_parts(shape.clone(), d)
        }))
    }

    /// 3D cross-correlation. `kernel` is `[C_out, C_in, kd, kh, kw]`, or
    /// `[N, C_out, C_in, kd, kh, kw]` for one kernel per batch item.
    pub fn conv3d(self, kernel: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeometry) -> Result<Var<'t>> {
        conv_like(self, kernel, bias, geom, false)
    }

    /// Transposed 3D convolution (adjoint of [`Var::conv3d`] in its input).
    /// `kernel` is `[C_out, C_in, kd, kh, kw]` with `C_in` matching this
    /// tensor's channels, optionally with a leading batch axis.
    pub fn conv3d_transpose(self, kernel: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeometry) -> Result<Var<'t>> {
        conv_like(self, kernel, bias, geom, true)
    }

    /// Per-item attention-modulated kernel:
    /// `out[n, o, i, s] = W[o, i, s] * (a_spa[n, s] + a_in[n, i] + a_out[n, o]) / 3`.
    pub fn modulate_kernel(self, a_spa: Var<'t>, a_in: Var<'t>, a_out: Var<'t>) -> Result<Var<'t>> {
        let w = self.rc();
        let (sp, ai, ao) = (a_spa.rc(), a_in.rc(), a_out.rc());
        let &[co, ci, kd, kh, kw] = w.shape() else {
            return Err(PvcError::dim("modulate_kernel", format!("kernel must be rank 5, got {:?}", w.shape())));
        };
        let s = kd * kh * kw;
        let n = sp.shape().first().copied().unwrap_or(0);
        let expect = |t: &Tensor, len: usize, what: &str| -> Result<()> {
            if t.shape() != [n, len] {
                return Err(PvcError::dim("modulate_kernel", format!("{what} attention has shape {:?}, expected [{n}, {len}]", t.shape())));
            }
            Ok(())
        };
        expect(&sp, s, "spatial")?;
        expect(&ai, ci, "input-channel")?;
        expect(&ao, co, "output-channel")?;
        let per = co * ci * s;
        let factor = move |b: usize, o: usize, i: usize, t: usize| {
            (sp.data()[b * s + t] + ai.data()[b * ci + i] + ao.data()[b * co + o]) / 3.0
        };
        let mut out = vec![0.0; n * per];
        for b in 0..n {
            for o in 0..co {
                for i in 0..ci {
                    let base = (o * ci + i) * s;
                    for t in 0..s {
                        out[b * per + base + t] = w.data()[base + t] * factor(b, o, i, t);
                    }
                }
            }
        }
        let inputs = [self, a_spa, a_in, a_out];
        Ok(self.tape.record(
            "modulate_kernel",
            Tensor::from_parts(vec![n, co, ci, kd, kh, kw], out),
            &inputs,
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut gw = vec![0.0; per];
                let mut gs = vec![0.0; n * s];
                let mut gi = vec![0.0; n * ci];
                let mut go = vec![0.0; n * co];
                for b in 0..n {
                    for o in 0..co {
                        for i in 0..ci {
                            let base = (o * ci + i) * s;
                            for t in 0..s {
                                let gv = gd[b * per + base + t];
                                gw[base + t] += gv * factor(b, o, i, t);
                                let gwv = gv * w.data()[base + t] / 3.0;
                                gs[b * s + t] += gwv;
                                gi[b * ci + i] += gwv;
                                go[b * co + o] += gwv;
                            }
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_parts(w.shape().to_vec(), gw)),
                    needs[1].then(|| Tensor::from_parts(vec![n, s], gs)),
                    needs[2].then(|| Tensor::from_parts(vec![n, ci], gi)),
                    needs[3].then(|| Tensor::from_parts(vec![n, co], go)),
                ]
            }),
        ))
    }

    /// Per-item masked mean of a `[N, C, D, H, W]` tensor with `C == 1`;
    /// `masks[n]` holds the voxel indices of item `n`. Returns `[N]`.
    pub fn masked_mean(self, masks: &[Vec<usize>]) -> Result<Var<'t>> {
        let x = self.rc();
        let [n, c, d, h, w] = shape5("masked_mean", x.shape())?;
        if c != 1 {
            return Err(PvcError::dim("masked_mean", format!("expected 1 channel, got {c}")));
        }
        if masks.len() != n {
            return Err(PvcError::dim("masked_mean", format!("{} masks for batch of {n}", masks.len())));
        }
        let vol = d * h * w;
        let mut out = Vec::with_capacity(n);
        for (b, m) in masks.iter().enumerate() {
            if m.is_empty() {
                return Err(PvcError::DegenerateRegion(format!("empty mask for batch item {b}")));
            }
            if let Some(&bad) = m.iter().find(|&&i| i >= vol) {
                return Err(PvcError::dim("masked_mean", format!("mask index {bad} outside volume of {vol} voxels")));
            }
            let item = &x.data()[b * vol..(b + 1) * vol];
            out.push(m.iter().map(|&i| item[i]).sum::<f64>() / m.len() as f64);
        }
        let masks = masks.to_vec();
        let in_shape = x.shape().to_vec();
        Ok(self.unary("masked_mean", Tensor::from_parts(vec![n], out), move |g| {
            let mut d = vec![0.0; n * vol];
            for (b, m) in masks.iter().enumerate() {
                let share = g.data()[b] / m.len() as f64;
                for &i in m {
                    d[b * vol + i] += share;
                }
            }
            Tensor::from_parts(in_shape.clone(), d)
        }))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a[i * k + t];
            for (o, bv) in row.iter_mut().zip(&b[t * p..(t + 1) * p]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Copies a centred window between two spatial grids, zero outside.
#[derive(Clone, Copy)]
struct WindowMap {
    src: [usize; 3],
    dst: [usize; 3],
    off: [isize; 3],
}

impl WindowMap {
    fn pairs(&self, mut f: impl FnMut(usize, usize)) {
        let [dd, dh, dw] = self.dst;
        let [sd, sh, sw] = self.src;
        for z in 0..dd {
            let sz = z as isize + self.off[0];
            if sz < 0 || sz >= sd as isize {
                continue;
            }
            for y in 0..dh {
                let sy = y as isize + self.off[1];
                if sy < 0 || sy >= sh as isize {
                    continue;
                }
                for x in 0..dw {
                    let sx = x as isize + self.off[2];
                    if sx < 0 || sx >= sw as isize {
                        continue;
                    }
                    f((z * dh + y) * dw + x, (sz as usize * sh + sy as usize) * sw + sx as usize);
                }
            }
        }
    }

    fn apply(&self, src: &[f64], channels: usize) -> Vec<f64> {
        let (sv, dv) = (self.src.iter().product::<usize>(), self.dst.iter().product::<usize>());
        let mut out = vec![0.0; channels * dv];
        for c in 0..channels {
            let (s, d) = (&src[c * sv..(c + 1) * sv], &mut out[c * dv..(c + 1) * dv]);
            self.pairs(|di, si| d[di] = s[si]);
        }
        out
    }

    fn adjoint(&self, dst: &[f64], channels: usize) -> Vec<f64> {
        let (sv, dv) = (self.src.iter().product::<usize>(), self.dst.iter().product::<usize>());
        let mut out = vec![0.0; channels * sv];
        for c in 0..channels {
            let (s, d) = (&mut out[c * sv..(c + 1) * sv], &dst[c * dv..(c + 1) * dv]);
            self.pairs(|di, si| s[si] += d[di]);
        }
        out
    }
}

fn conv_like<'t>(
    input: Var<'t>,
    kernel: Var<'t>,
    bias: Option<Var<'t>>,
    geom: ConvGeometry,
    transpose: bool,
) -> Result<Var<'t>> {
    let op = if transpose { "conv3d_transpose" } else { "conv3d" };
    let x = input.rc();
    let k = kernel.rc();
    let [n, c_in, d, h, w] = shape5(op, x.shape())?;
    let (per_item, ks) = match k.shape() {
        &[co, ci, kd, kh, kw] => (false, [co, ci, kd, kh, kw]),
        &[kn, co, ci, kd, kh, kw] => {
            if kn != n {
                return Err(PvcError::dim(op, format!("per-item kernel batch {kn} != input batch {n}")));
            }
            (true, [co, ci, kd, kh, kw])
        }
        other => return Err(PvcError::dim(op, format!("kernel must be rank 5 or 6, got {other:?}"))),
    };
    let [c_out, k_in, kd, kh, kw] = ks;
    if k_in != c_in {
        return Err(PvcError::dim(op, format!("axis C_in: input has {c_in} channels, kernel expects {k_in}")));
    }
    let k_dims = [kd, kh, kw];
    let in_dims = [d, h, w];
    let out_dims = if transpose {
        geom.transpose_output(op, in_dims, k_dims)?
    } else {
        geom.conv_output(op, in_dims, k_dims)?
    };
    let b = bias.map(|b| b.rc());
    if let Some(b) = &b {
        if b.shape() != [c_out] {
            return Err(PvcError::dim(op, format!("bias shape {:?}, expected [{c_out}]", b.shape())));
        }
    }
    let plan = if transpose {
        Plan { batch: n, a_ch: c_in, b_ch: c_out, a_dims: in_dims, b_dims: out_dims, k_dims, geom, layout: KernelLayout::BMajor, per_item }
    } else {
        Plan { batch: n, a_ch: c_out, b_ch: c_in, a_dims: out_dims, b_dims: in_dims, k_dims, geom, layout: KernelLayout::AMajor, per_item }
    };
    debug_assert_eq!(plan.kernel_len(), k.len());
    let out_vol: usize = out_dims.iter().product();
    let mut out = vec![0.0; n * c_out * out_vol];
    if transpose {
        plan.scatter(x.data(), &mut out, k.data());
    } else {
        plan.gather(&mut out, x.data(), k.data());
    }
    if let Some(b) = &b {
        for item in out.chunks_mut(c_out * out_vol) {
            for (ch, &bv) in item.chunks_mut(out_vol).zip(b.data()) {
                ch.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    let out_shape = vec![n, c_out, out_dims[0], out_dims[1], out_dims[2]];
    let in_shape = x.shape().to_vec();
    let k_shape = k.shape().to_vec();
    let mut inputs = vec![input, kernel];
    inputs.extend(bias);
    let has_bias = b.is_some();
    Ok(input.tape.record(
        op,
        Tensor::from_parts(out_shape, out),
        &inputs,
        Box::new(move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut gi = vec![0.0; in_shape.iter().product()];
                if transpose {
                    plan.gather(&mut gi, gd, k.data());
                } else {
                    plan.scatter(gd, &mut gi, k.data());
                }
                Tensor::from_parts(in_shape.clone(), gi)
            });
            let gk = needs[1].then(|| {
                let data = if transpose {
                    plan.correlate(x.data(), gd)
                } else {
                    plan.correlate(gd, x.data())
                };
                Tensor::from_parts(k_shape.clone(), data)
            });
            let mut grads = vec![gx, gk];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut s = vec![0.0; c_out];
                    for item in gd.chunks(c_out * out_vol) {
                        for (acc, ch) in s.iter_mut().zip(item.chunks(out_vol)) {
                            *acc += ch.iter().sum::<f64>();
                        }
                    }
                    Tensor::from_parts(vec![c_out], s)
                }));
            }
            grads
        }),
    ))
}
