//! Differentiable elementwise, reduction and linear-algebra ops.

use crate::shape::{self, broadcast_shape, broadcast_strides, expand_to, for_each_offset2, numel, reduce_to};
use crate::storage::{map_storage, map_storage2};
use crate::tensor::Backward;
use crate::{DType, Element, Result, Storage, Tensor, TensorError};

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary_kernel<E: Element>(
    a: &[E],
    ash: &[usize],
    b: &[E],
    bsh: &[usize],
    out: &[usize],
    f: impl Fn(E, E) -> E,
) -> Vec<E> {
    let n = numel(out);
    if ash == bsh {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 && a.len() == n {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    if a.len() == 1 && b.len() == n {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    let sa = broadcast_strides(ash, out);
    let sb = broadcast_strides(bsh, out);
    let mut v = Vec::with_capacity(n);
    for_each_offset2(out, &sa, &sb, |i, j| v.push(f(a[i], b[j])));
    v
}

fn apply_binary(
    kind: BinKind,
    a: &Storage,
    ash: &[usize],
    b: &Storage,
    bsh: &[usize],
    out: &[usize],
) -> Result<Storage> {
    let op = "binary";
    map_storage2!(op, a, b, |x, y| match kind {
        BinKind::Add => binary_kernel(x, ash, y, bsh, out, |p, q| p + q),
        BinKind::Sub => binary_kernel(x, ash, y, bsh, out, |p, q| p - q),
        BinKind::Mul => binary_kernel(x, ash, y, bsh, out, |p, q| p * q),
        BinKind::Div => binary_kernel(x, ash, y, bsh, out, |p, q| p / q),
    })
}

fn reduce_storage(g: &Storage, from: &[usize], to: &[usize]) -> Storage {
    map_storage!(g, |v| reduce_to(v, from, to))
}

fn expand_storage(g: &Storage, from: &[usize], to: &[usize]) -> Storage {
    map_storage!(g, |v| expand_to(v, from, to))
}

struct BinaryBackward(BinKind);

impl Backward for BinaryBackward {
    fn backward(&self, g: &Storage, inputs: &[Tensor], out: &Tensor) -> Result<Vec<Option<Storage>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let os = out.shape();
        let need_a = a.requires_grad();
        let need_b = b.requires_grad();
        let (ga, gb) = match self.0 {
            BinKind::Add => {
                (need_a.then(|| reduce_storage(g, os, a.shape())), need_b.then(|| reduce_storage(g, os, b.shape())))
            }
            BinKind::Sub => {
                let gb = if need_b {
                    let neg = map_storage!(g, |v| v.iter().map(|&x| -x).collect());
                    Some(reduce_storage(&neg, os, b.shape()))
                } else {
                    None
                };
                (need_a.then(|| reduce_storage(g, os, a.shape())), gb)
            }
            BinKind::Mul => {
                let ga = if need_a {
                    let full = apply_binary(BinKind::Mul, g, os, b.storage(), b.shape(), os)?;
                    Some(reduce_storage(&full, os, a.shape()))
                } else {
                    None
                };
                let gb = if need_b {
                    let full = apply_binary(BinKind::Mul, g, os, a.storage(), a.shape(), os)?;
                    Some(reduce_storage(&full, os, b.shape()))
                } else {
                    None
                };
                (ga, gb)
            }
            BinKind::Div => {
                let ga = if need_a {
                    let full = apply_binary(BinKind::Div, g, os, b.storage(), b.shape(), os)?;
                    Some(reduce_storage(&full, os, a.shape()))
                } else {
                    None
                };
                let gb = if need_b {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let q = apply_binary(BinKind::Div, out.storage(), os, b.storage(), b.shape(), os)?;
                    let full = apply_binary(BinKind::Mul, g, os, &q, os, os)?;
                    let full = map_storage!(&full, |v| v.iter().map(|&x| -x).collect());
                    Some(reduce_storage(&full, os, b.shape()))
                } else {
                    None
                };
                (ga, gb)
            }
        };
        Ok(vec![ga, gb])
    }
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Exp,
    Log,
    Sqrt,
    Abs,
    LeakyRelu(f64),
    Powf(f64),
    Affine(f64, f64),
}

fn unary_forward<E: Element>(kind: UnaryKind, v: &[E]) -> Vec<E> {
    match kind {
        UnaryKind::Exp => v.iter().map(|x| x.exp()).collect(),
        UnaryKind::Log => v.iter().map(|x| x.ln()).collect(),
        UnaryKind::Sqrt => v.iter().map(|x| x.sqrt()).collect(),
        UnaryKind::Abs => v.iter().map(|x| x.abs()).collect(),
        UnaryKind::LeakyRelu(slope) => {
            let s = E::from_f64(slope);
            v.iter().map(|&x| if x > E::zero() { x } else { x * s }).collect()
        }
        UnaryKind::Powf(p) => {
            if p == 2.0 {
                v.iter().map(|&x| x * x).collect()
            } else {
                let p = E::from_f64(p);
                v.iter().map(|x| x.powf(p)).collect()
            }
        }
        UnaryKind::Affine(m, a) => {
            let (m, a) = (E::from_f64(m), E::from_f64(a));
            v.iter().map(|&x| x * m + a).collect()
        }
    }
}

fn unary_backward<E: Element>(kind: UnaryKind, g: &[E], x: &[E], y: &[E]) -> Vec<E> {
    let zip3 = |f: &dyn Fn(E, E, E) -> E| g.iter().zip(x).zip(y).map(|((&g, &x), &y)| f(g, x, y)).collect();
    match kind {
        UnaryKind::Exp => zip3(&|g, _, y| g * y),
        UnaryKind::Log => zip3(&|g, x, _| g / x),
        UnaryKind::Sqrt => {
            let two = E::from_f64(2.0);
            zip3(&|g, _, y| g / (two * y))
        }
        UnaryKind::Abs => zip3(&|g, x, _| {
            if x > E::zero() {
                g
            } else if x < E::zero() {
                -g
            } else {
                E::zero()
            }
        }),
        UnaryKind::LeakyRelu(slope) => {
            let s = E::from_f64(slope);
            zip3(&|g, x, _| if x > E::zero() { g } else { g * s })
        }
        UnaryKind::Powf(p) => {
            let pe = E::from_f64(p);
            let pm1 = E::from_f64(p - 1.0);
            zip3(&|g, x, _| if p == 2.0 { g * pe * x } else { g * pe * x.powf(pm1) })
        }
        UnaryKind::Affine(m, _) => {
            let m = E::from_f64(m);
            g.iter().map(|&g| g * m).collect()
        }
    }
}

struct UnaryBackward(UnaryKind);

impl Backward for UnaryBackward {
    fn backward(&self, g: &Storage, inputs: &[Tensor], out: &Tensor) -> Result<Vec<Option<Storage>>> {
        let x = inputs[0].storage();
        let gx = match (g, x, out.storage()) {
            (Storage::F32(g), Storage::F32(x), Storage::F32(y)) => Storage::F32(unary_backward(self.0, g, x, y)),
            (Storage::F64(g), Storage::F64(x), Storage::F64(y)) => Storage::F64(unary_backward(self.0, g, x, y)),
            _ => unreachable!("unary op preserves dtype"),
        };
        Ok(vec![Some(gx)])
    }
}

struct SumToBackward;

impl Backward for SumToBackward {
    fn backward(&self, g: &Storage, inputs: &[Tensor], out: &Tensor) -> Result<Vec<Option<Storage>>> {
        Ok(vec![Some(expand_storage(g, out.shape(), inputs[0].shape()))])
    }
}

struct ReshapeBackward;

impl Backward for ReshapeBackward {
    fn backward(&self, g: &Storage, _inputs: &[Tensor], _out: &Tensor) -> Result<Vec<Option<Storage>>> {
        Ok(vec![Some(g.clone())])
    }
}

fn transpose_kernel<E: Element>(v: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

struct TransposeBackward;

impl Backward for TransposeBackward {
    fn backward(&self, g: &Storage, _inputs: &[Tensor], out: &Tensor) -> Result<Vec<Option<Storage>>> {
        let (r, c) = (out.shape()[0], out.shape()[1]);
        Ok(vec![Some(map_storage!(g, |v| transpose_kernel(v, r, c)))])
    }
}

fn matmul_kernel<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    E::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, E::zero(), &mut c, n as isize, 1);
    c
}

struct MatmulBackward;

impl Backward for MatmulBackward {
    fn backward(&self, g: &Storage, inputs: &[Tensor], _out: &Tensor) -> Result<Vec<Option<Storage>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        fn ga<E: Element>(g: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
            let mut out = vec![E::zero(); m * k];
            E::gemm(m, n, k, g, n as isize, 1, b, 1, n as isize, E::zero(), &mut out, k as isize, 1);
            out
        }
        fn gb<E: Element>(g: &[E], a: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
            let mut out = vec![E::zero(); k * n];
            E::gemm(k, m, n, a, 1, k as isize, g, n as isize, 1, E::zero(), &mut out, n as isize, 1);
            out
        }
        let grad_a = if a.requires_grad() {
            Some(map_storage2!("matmul", g, b.storage(), |g, b| ga(g, b, m, k, n))?)
        } else {
            None
        };
        let grad_b = if b.requires_grad() {
            Some(map_storage2!("matmul", g, a.storage(), |g, a| gb(g, a, m, k, n))?)
        } else {
            None
        };
        Ok(vec![grad_a, grad_b])
    }
}

fn log_softmax_kernel<E: Element>(v: &[E], cols: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(v.len());
    for row in v.chunks(cols) {
        let max = row.iter().fold(E::neg_infinity(), |m, &x| m.max(x));
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<E>().ln() + max;
        out.extend(row.iter().map(|&x| x - lse));
    }
    out
}

fn log_softmax_grad<E: Element>(g: &[E], y: &[E], cols: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(g.len());
    for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
        let s: E = gr.iter().copied().sum();
        out.extend(gr.iter().zip(yr).map(|(&g, &y)| g - y.exp() * s));
    }
    out
}

fn softmax_kernel<E: Element>(v: &[E], cols: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(v.len());
    for row in v.chunks(cols) {
        let max = row.iter().fold(E::neg_infinity(), |m, &x| m.max(x));
        let start = out.len();
        out.extend(row.iter().map(|&x| (x - max).exp()));
        let s: E = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|x| *x = *x / s);
    }
    out
}

fn softmax_grad<E: Element>(g: &[E], y: &[E], cols: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(g.len());
    for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
        let dot: E = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
        out.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
    }
    out
}

struct LogSoftmaxBackward;

impl Backward for LogSoftmaxBackward {
    fn backward(&self, g: &Storage, _inputs: &[Tensor], out: &Tensor) -> Result<Vec<Option<Storage>>> {
        let cols = *out.shape().last().unwrap_or(&1);
        Ok(vec![Some(map_storage2!("log_softmax", g, out.storage(), |g, y| log_softmax_grad(g, y, cols))?)])
    }
}

struct SoftmaxBackward;

impl Backward for SoftmaxBackward {
    fn backward(&self, g: &Storage, _inputs: &[Tensor], out: &Tensor) -> Result<Vec<Option<Storage>>> {
        let cols = *out.shape().last().unwrap_or(&1);
        Ok(vec![Some(map_storage2!("softmax", g, out.storage(), |g, y| softmax_grad(g, y, cols))?)])
    }
}

struct CastBackward(DType);

impl Backward for CastBackward {
    fn backward(&self, g: &Storage, _inputs: &[Tensor], _out: &Tensor) -> Result<Vec<Option<Storage>>> {
        Ok(vec![Some(g.to_dtype(self.0))])
    }
}

impl Tensor {
    fn binary(&self, other: &Tensor, kind: BinKind) -> Result<Tensor> {
        let out = broadcast_shape("binary", self.shape(), other.shape())?;
        let data = apply_binary(kind, self.storage(), self.shape(), other.storage(), other.shape(), &out)?;
        Ok(Tensor::from_op(out, data, &[self, other], BinaryBackward(kind)))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Div)
    }

    fn unary(&self, kind: UnaryKind) -> Tensor {
        let data = map_storage!(self.storage(), |v| unary_forward(kind, v));
        Tensor::from_op(self.shape().to_vec(), data, &[self], UnaryBackward(kind))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(&self) -> Tensor {
        self.unary(UnaryKind::Log)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(UnaryKind::Abs)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(UnaryKind::LeakyRelu(0.0))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(UnaryKind::LeakyRelu(slope))
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary(UnaryKind::Powf(p))
    }

    pub fn sqr(&self) -> Tensor {
        self.unary(UnaryKind::Powf(2.0))
    }

    /// `self * mul + add`
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        self.unary(UnaryKind::Affine(mul, add))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.affine(factor, 0.0)
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    /// Sum down to `target`, which must broadcast to this tensor's shape.
    pub fn sum_to(&self, target: &[usize]) -> Result<Tensor> {
        let padded: Vec<usize> =
            std::iter::repeat_n(1, self.rank().saturating_sub(target.len())).chain(target.iter().copied()).collect();
        if padded.len() != self.rank() || padded.iter().zip(self.shape()).any(|(&t, &s)| t != 1 && t != s) {
            return Err(TensorError::ShapeMismatch { op: "sum_to", lhs: self.shape().to_vec(), rhs: target.to_vec() });
        }
        let data = reduce_storage(self.storage(), self.shape(), &padded);
        let summed = Tensor::from_op(padded, data, &[self], SumToBackward);
        summed.reshape(target)
    }

    pub fn sum_dims(&self, dims: &[isize], keepdim: bool) -> Result<Tensor> {
        let mut kept = self.shape().to_vec();
        let mut axes = Vec::with_capacity(dims.len());
        for &d in dims {
            let a = shape::axis(self.rank(), d)?;
            kept[a] = 1;
            axes.push(a);
        }
        let data = reduce_storage(self.storage(), self.shape(), &kept);
        let summed = Tensor::from_op(kept.clone(), data, &[self], SumToBackward);
        if keepdim {
            Ok(summed)
        } else {
            let squeezed: Vec<usize> =
                kept.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
            summed.reshape(squeezed)
        }
    }

    pub fn mean_dims(&self, dims: &[isize], keepdim: bool) -> Result<Tensor> {
        let mut count = 1usize;
        for &d in dims {
            count *= self.shape()[shape::axis(self.rank(), d)?];
        }
        Ok(self.sum_dims(dims, keepdim)?.scale(1.0 / count.max(1) as f64))
    }

    pub fn sum_all(&self) -> Tensor {
        self.sum_to(&[]).expect("reducing to a scalar always broadcasts")
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(TensorError::Reshape { from: self.shape().to_vec(), to: shape });
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Ok(Tensor::from_op(shape, self.storage().clone(), &[self], ReshapeBackward))
    }

    /// Collapse every axis after the first.
    pub fn flatten_from1(&self) -> Result<Tensor> {
        let n = self.shape().first().copied().unwrap_or(1);
        let rest = if n == 0 { 0 } else { self.numel() / n };
        self.reshape(vec![n, rest])
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Tensor> {
        let [r, c] = self.dims2("t")?;
        let data = map_storage!(self.storage(), |v| transpose_kernel(v, r, c));
        Ok(Tensor::from_op(vec![c, r], data, &[self], TransposeBackward))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = self.dims2("matmul")?;
        let [k2, n] = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let data = map_storage2!("matmul", self.storage(), other.storage(), |a, b| matmul_kernel(a, b, m, k, n))?;
        Ok(Tensor::from_op(vec![m, n], data, &[self, other], MatmulBackward))
    }

    pub fn log_softmax(&self) -> Result<Tensor> {
        let cols = *self.shape().last().ok_or(TensorError::Rank { op: "log_softmax", expected: 1, got: vec![] })?;
        let data = map_storage!(self.storage(), |v| log_softmax_kernel(v, cols));
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self], LogSoftmaxBackward))
    }

    pub fn softmax(&self) -> Result<Tensor> {
        let cols = *self.shape().last().ok_or(TensorError::Rank { op: "softmax", expected: 1, got: vec![] })?;
        let data = map_storage!(self.storage(), |v| softmax_kernel(v, cols));
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self], SoftmaxBackward))
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        let from = self.dtype();
        Tensor::from_op(self.shape().to_vec(), self.storage().to_dtype(dtype), &[self], CastBackward(from))
    }

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape() {
            &[a, b] => Ok([a, b]),
            s => Err(TensorError::Rank { op, expected: 2, got: s.to_vec() }),
        }
    }

    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape() {
            &[a, b, c, d] => Ok([a, b, c, d]),
            s => Err(TensorError::Rank { op, expected: 4, got: s.to_vec() }),
        }
    }

    /// Rows `indices` of the leading axis (no history).
    pub fn index_select0(&self, indices: &[usize]) -> Result<Tensor> {
        let n = *self.shape().first().ok_or(TensorError::Rank { op: "index_select0", expected: 1, got: vec![] })?;
        let row = if n == 0 { 0 } else { self.numel() / n };
        for &i in indices {
            if i >= n {
                return Err(TensorError::Index { index: i, size: n });
            }
        }
        let data = map_storage!(self.storage(), |v| {
            let mut out = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                out.extend_from_slice(&v[i * row..(i + 1) * row]);
            }
            out
        });
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        Tensor::from_storage(data, shape)
    }

    /// Concatenate along the leading axis (no history).
    pub fn cat0(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid("cat0 of zero tensors".into()))?;
        let tail = &first.shape()[1..];
        let mut rows = 0;
        for p in parts {
            if &p.shape()[1..] != tail || p.dtype() != first.dtype() {
                return Err(TensorError::ShapeMismatch {
                    op: "cat0",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += p.shape()[0];
        }
        let data = match first.dtype() {
            DType::F32 => Storage::F32(parts.iter().flat_map(|p| f32::slice(p.storage()).iter().copied()).collect()),
            DType::F64 => Storage::F64(parts.iter().flat_map(|p| f64::slice(p.storage()).iter().copied()).collect()),
        };
        let mut shape = first.shape().to_vec();
        shape[0] = rows;
        Tensor::from_storage(data, shape)
    }

    /// Stack equally shaped tensors along a new leading axis (no history).
    pub fn stack0(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid("stack0 of zero tensors".into()))?;
        let mut lifted = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape() != first.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack0",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            let mut s = vec![1];
            s.extend_from_slice(p.shape());
            lifted.push(Tensor::from_storage(p.storage().clone(), s)?);
        }
        Tensor::cat0(&lifted)
    }

    /// One-hot rows for integer class labels.
    pub fn one_hot(labels: &[usize], classes: usize, dtype: DType) -> Result<Tensor> {
        let mut v = vec![0.0; labels.len() * classes];
        for (r, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(TensorError::Index { index: l, size: classes });
            }
            v[r * classes + l] = 1.0;
        }
        Tensor::from_f64_slice(&v, vec![labels.len(), classes], dtype)
    }

    /// Index of the maximum along the last axis, per row.
    pub fn argmax_last(&self) -> Vec<usize> {
        let cols = *self.shape().last().unwrap_or(&1);
        if cols == 0 {
            return Vec::new();
        }
        self.to_vec_f64()
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}
