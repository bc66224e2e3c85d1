use super::{ConvGeom, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{check_shape, numel};

/// `(outer, len, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        if i < rank - s.len() {
            1
        } else {
            s[i - (rank - s.len())]
        }
    };
    (0..rank)
        .map(|i| {
            let (da, db) = (dim(a, i), dim(b, i));
            if da == db || db == 1 {
                Ok(da)
            } else if da == 1 {
                Ok(db)
            } else {
                Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")))
            }
        })
        .collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

impl Tape {
    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = first.shape();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let same_rank = s.len() == base.len();
            let compatible = same_rank
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat on axis {axis}: shape {s:?} incompatible with {base:?}"
                )));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for (p, &len) in parts.iter().zip(&lens) {
                    let v = &nodes[p.id].value;
                    out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        let inputs = parts.iter().map(|p| p.id).collect();
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs,
                outer,
                lens,
                inner,
            },
            rg,
        ))
    }
}

impl<'t> Var<'t> {
    fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let out: Vec<f64> = self.with_value(|v| v.iter().map(|&x| f(x)).collect());
        self.tape.push(self.shape(), out, op, self.requires_grad())
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = {
            let nodes = self.tape.nodes.borrow();
            matmul_raw(&nodes[self.id].value, &nodes[other.id].value, m, k, n)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Applies a `[k, n]` weight to the last axis of `self` (`[..., k]`).
    pub fn linear(self, weight: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let wshape = weight.shape();
        let k = *shape
            .last()
            .ok_or_else(|| Error::shape("linear on a scalar"))?;
        if wshape.len() != 2 || wshape[0] != k {
            return Err(Error::shape(format!(
                "linear of {shape:?} with weight {wshape:?}"
            )));
        }
        if shape.len() == 2 {
            return self.matmul(weight);
        }
        let rows = numel(&shape[..shape.len() - 1]);
        let y = self.reshape(&[rows, k])?.matmul(weight)?;
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(wshape[1]);
        y.reshape(&out_shape)
    }

    /// `self . weight + bias` over the last axis.
    pub fn affine(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.linear(weight)?.add(bias)
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        make: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            let target = broadcast_shape(&sa, &sb)?;
            let a = if sa == target {
                self
            } else {
                self.broadcast_to(&target)?
            };
            let b = if sb == target {
                other
            } else {
                other.broadcast_to(&target)?
            };
            return a.binary(b, f, make);
        }
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (x, y) = (&nodes[self.id].value, &nodes[other.id].value);
            x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(sa, out, make(self.id, other.id), rg))
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a - b, Op::Sub)
    }

    /// Elementwise (Hadamard) product with numpy broadcasting.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a * b, Op::Mul)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.unary(|x| x * factor, Op::Scale { x: self.id, factor })
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::Shift(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| if x > 0.0 { x } else { 0.0 }, Op::Relu(self.id))
    }

    fn reduce(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let shape = self.shape();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let mut out = vec![0.0; outer * inner];
        self.with_value(|v| {
            for o in 0..outer {
                for l in 0..len {
                    let src = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        });
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let x = self.id;
        let op = if mean {
            Op::Mean {
                x,
                outer,
                len,
                inner,
            }
        } else {
            Op::Sum {
                x,
                outer,
                len,
                inner,
            }
        };
        Ok(self.tape.push(new_shape, out, op, self.requires_grad()))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, true)
    }

    /// Max over `axis`, removing it. Gradient goes to the first maximal entry.
    pub fn max(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        self.with_value(|v| {
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    for l in 0..len {
                        let idx = (o * len + l) * inner + i;
                        // strict > keeps the first index on ties
                        if l == 0 || v[idx] > out[slot] {
                            out[slot] = v[idx];
                            argmax[slot] = idx;
                        }
                    }
                }
            }
        });
        let mut new_shape = shape;
        new_shape.remove(axis);
        Ok(self.tape.push(
            new_shape,
            out,
            Op::Max { x: self.id, argmax },
            self.requires_grad(),
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(self) -> Result<Var<'t>> {
        let n = self.numel();
        self.reshape(&[n])?.sum(0)
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = self.numel();
        self.reshape(&[n])?.mean(0)
    }

    /// Mean squared difference to `target` as a scalar.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        if self.shape() != target.shape() {
            return Err(Error::shape(format!(
                "mse of {:?} against {:?}",
                self.shape(),
                target.shape()
            )));
        }
        let d = self.sub(target)?;
        d.mul(d)?.mean_all()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        check_shape(shape)?;
        if numel(shape) != self.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} to {shape:?}",
                self.shape()
            )));
        }
        let out = self.data();
        Ok(self.tape.push(
            shape.to_vec(),
            out,
            Op::Reshape(self.id),
            self.requires_grad(),
        ))
    }

    fn gather(self, shape: Vec<usize>, map: Vec<usize>) -> Var<'t> {
        let out = self.with_value(|v| map.iter().map(|&i| v[i]).collect());
        self.tape.push(
            shape,
            out,
            Op::Gather { x: self.id, map },
            self.requires_grad(),
        )
    }

    /// Numpy-style broadcast to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let src = self.shape();
        if broadcast_shape(shape, &src)? != shape {
            return Err(Error::shape(format!(
                "cannot broadcast {src:?} to {shape:?}"
            )));
        }
        let rank = shape.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, rank - src.len())
            .chain(src.iter().copied())
            .collect();
        let src_strides = strides(&padded);
        let out_strides = strides(shape);
        let map = (0..numel(shape))
            .map(|o| {
                let mut rem = o;
                let mut idx = 0;
                for d in 0..rank {
                    let c = rem / out_strides[d];
                    rem %= out_strides[d];
                    if padded[d] != 1 {
                        idx += c * src_strides[d];
                    }
                }
                idx
            })
            .collect();
        Ok(self.gather(shape.to_vec(), map))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let src = self.shape();
        let mut seen = vec![false; src.len()];
        if perm.len() != src.len()
            || perm
                .iter()
                .any(|&p| p >= src.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(format!(
                "invalid permutation {perm:?} for {src:?}"
            )));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let src_strides = strides(&src);
        let out_strides = strides(&shape);
        let map = (0..self.numel())
            .map(|o| {
                let mut rem = o;
                let mut idx = 0;
                for d in 0..shape.len() {
                    let c = rem / out_strides[d];
                    rem %= out_strides[d];
                    idx += c * src_strides[perm[d]];
                }
                idx
            })
            .collect();
        Ok(self.gather(shape, map))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return Err(Error::shape(format!("transpose of {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let (outer, full, inner) = split_axis(&shape, axis)?;
        if len == 0 || start + len > full {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) of axis {axis} with size {full}",
                start + len
            )));
        }
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            map.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.gather(out_shape, map))
    }

    /// Row `index` of a `[rows, dim]` table, as a `[dim]` vector.
    pub fn embedding(self, index: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "embedding table must be 2-D, got {shape:?}"
            )));
        }
        if index >= shape[0] {
            return Err(Error::Index(format!(
                "embedding index {index} out of range {}",
                shape[0]
            )));
        }
        let dim = shape[1];
        Ok(self.gather(vec![dim], (index * dim..(index + 1) * dim).collect()))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let k = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax on a scalar"))?;
        let out = self.with_value(|v| {
            let mut out = vec![0.0; v.len()];
            for (src, dst) in v.chunks(k).zip(out.chunks_mut(k)) {
                let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - m).exp();
                    z += *d;
                }
                dst.iter_mut().for_each(|d| *d /= z);
            }
            out
        });
        Ok(self
            .tape
            .push(shape, out, Op::Softmax(self.id), self.requires_grad()))
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let k = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        let (out, inv_std) = self.with_value(|v| {
            let mut out = vec![0.0; v.len()];
            let mut inv_std = Vec::with_capacity(v.len() / k);
            for (src, dst) in v.chunks(k).zip(out.chunks_mut(k)) {
                let mu = src.iter().sum::<f64>() / k as f64;
                let var = src.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / k as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = (s - mu) * inv;
                }
                inv_std.push(inv);
            }
            (out, inv_std)
        });
        Ok(self.tape.push(
            shape,
            out,
            Op::LayerNorm {
                x: self.id,
                inv_std,
            },
            self.requires_grad(),
        ))
    }

    /// Causal dilated 1-D convolution over the leading (time) axis.
    ///
    /// `self` is `[T, C_in]` or `[T, ..., C_in]` (middle axes are batch);
    /// `weight` is `[taps, C_in, C_out]`. Tap `j` reads time `t - j*dilation`,
    /// with zeros before the start, so the output keeps length `T`.
    pub fn conv1d(self, weight: Var<'t>, dilation: usize) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() < 2 || ws.len() != 3 || ws[1] != *xs.last().unwrap() || dilation == 0 {
            return Err(Error::shape(format!(
                "conv1d of input {xs:?} with weight {ws:?} and dilation {dilation}"
            )));
        }
        let geom = ConvGeom {
            steps: xs[0],
            batch: numel(&xs[1..xs.len() - 1]),
            c_in: ws[1],
            c_out: ws[2],
            taps: ws[0],
            dilation,
        };
        let out = {
            let nodes = self.tape.nodes.borrow();
            conv_forward(&nodes[self.id].value, &nodes[weight.id].value, geom)
        };
        let mut shape = xs;
        *shape.last_mut().unwrap() = geom.c_out;
        let rg = self.requires_grad() || weight.requires_grad();
        Ok(self.tape.push(
            shape,
            out,
            Op::Conv1d {
                x: self.id,
                w: weight.id,
                geom,
            },
            rg,
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_forward(x: &[f64], w: &[f64], g: ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.steps * g.batch * g.c_out];
    for t in 0..g.steps {
        for b in 0..g.batch {
            let dst = &mut out[(t * g.batch + b) * g.c_out..(t * g.batch + b + 1) * g.c_out];
            for j in 0..g.taps {
                let Some(src_t) = t.checked_sub(j * g.dilation) else {
                    break;
                };
                let src = &x[(src_t * g.batch + b) * g.c_in..(src_t * g.batch + b + 1) * g.c_in];
                for (ci, &xv) in src.iter().enumerate() {
                    let wrow = &w[(j * g.c_in + ci) * g.c_out..(j * g.c_in + ci + 1) * g.c_out];
                    for (d, &wv) in dst.iter_mut().zip(wrow) {
                        *d += xv * wv;
                    }
                }
            }
        }
    }
    out
}
