//! Convolution and batch-normalization kernels.

use crate::storage::map_storage2;
use crate::tensor::Backward;
use crate::{Element, Result, Storage, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_size(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// Unfold one `(channels, h, w)` image into a `(channels*k*k, oh*ow)` matrix.
fn im2col<E: Element>(x: &[E], c: usize, h: usize, w: usize, geo: ConvGeometry, oh: usize, ow: usize, col: &mut [E]) {
    let k = geo.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        *d = if ix < 0 || ix >= w as isize { E::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
fn col2im<E: Element>(col: &[E], c: usize, h: usize, w: usize, geo: ConvGeometry, oh: usize, ow: usize, x: &mut [E]) {
    let k = geo.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

fn conv_forward<E: Element>(x: &[E], wt: &[E], d: &ConvDims, geo: ConvGeometry) -> Vec<E> {
    let kk = d.cin * geo.kernel * geo.kernel;
    let p = d.oh * d.ow;
    let mut col = vec![E::zero(); kk * p];
    let mut out = vec![E::zero(); d.n * d.cout * p];
    for b in 0..d.n {
        im2col(&x[b * d.cin * d.h * d.w..], d.cin, d.h, d.w, geo, d.oh, d.ow, &mut col);
        E::gemm(
            d.cout,
            kk,
            p,
            wt,
            kk as isize,
            1,
            &col,
            p as isize,
            1,
            E::zero(),
            &mut out[b * d.cout * p..],
            p as isize,
            1,
        );
    }
    out
}

fn conv_backward<E: Element>(
    g: &[E],
    x: &[E],
    wt: &[E],
    d: &ConvDims,
    geo: ConvGeometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let kk = d.cin * geo.kernel * geo.kernel;
    let p = d.oh * d.ow;
    let mut col = vec![E::zero(); kk * p];
    let mut gx = need_x.then(|| vec![E::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![E::zero(); wt.len()]);
    for b in 0..d.n {
        let gb = &g[b * d.cout * p..(b + 1) * d.cout * p];
        if let Some(gw) = gw.as_mut() {
            im2col(&x[b * d.cin * d.h * d.w..], d.cin, d.h, d.w, geo, d.oh, d.ow, &mut col);
            // gw (cout x kk) += g_b (cout x p) . col^T (p x kk)
            E::gemm(d.cout, p, kk, gb, p as isize, 1, &col, 1, p as isize, E::one(), gw, kk as isize, 1);
        }
        if let Some(gx) = gx.as_mut() {
            // col (kk x p) = w^T (kk x cout) . g_b (cout x p)
            E::gemm(kk, d.cout, p, wt, 1, kk as isize, gb, p as isize, 1, E::zero(), &mut col, p as isize, 1);
            col2im(&col, d.cin, d.h, d.w, geo, d.oh, d.ow, &mut gx[b * d.cin * d.h * d.w..]);
        }
    }
    (gx, gw)
}

struct Conv2dBackward {
    dims: ConvDims,
    geo: ConvGeometry,
}

impl Backward for Conv2dBackward {
    fn backward(&self, g: &Storage, inputs: &[Tensor], _out: &Tensor) -> Result<Vec<Option<Storage>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (nx, nw) = (x.requires_grad(), w.requires_grad());
        let (gx, gw) = match (g, x.storage(), w.storage()) {
            (Storage::F32(g), Storage::F32(xs), Storage::F32(ws)) => {
                let (a, b) = conv_backward(g, xs, ws, &self.dims, self.geo, nx, nw);
                (a.map(Storage::F32), b.map(Storage::F32))
            }
            (Storage::F64(g), Storage::F64(xs), Storage::F64(ws)) => {
                let (a, b) = conv_backward(g, xs, ws, &self.dims, self.geo, nx, nw);
                (a.map(Storage::F64), b.map(Storage::F64))
            }
            _ => unreachable!("conv2d inputs share a dtype"),
        };
        Ok(vec![gx, gw])
    }
}

/// Transposed convolution is conv backward-data in the forward direction.
fn conv_t_forward<E: Element>(x: &[E], wt: &[E], d: &ConvDims, geo: ConvGeometry) -> Vec<E> {
    // here d.h/d.w are the *output* spatial dims and d.oh/d.ow the input ones
    let kk = d.cout * geo.kernel * geo.kernel;
    let p = d.oh * d.ow;
    let mut col = vec![E::zero(); kk * p];
    let mut out = vec![E::zero(); d.n * d.cout * d.h * d.w];
    for b in 0..d.n {
        let xb = &x[b * d.cin * p..(b + 1) * d.cin * p];
        // col (kk x p) = w^T (kk x cin) . x_b (cin x p)
        E::gemm(kk, d.cin, p, wt, 1, kk as isize, xb, p as isize, 1, E::zero(), &mut col, p as isize, 1);
        col2im(&col, d.cout, d.h, d.w, geo, d.oh, d.ow, &mut out[b * d.cout * d.h * d.w..]);
    }
    out
}

fn conv_t_backward<E: Element>(
    g: &[E],
    x: &[E],
    wt: &[E],
    d: &ConvDims,
    geo: ConvGeometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let kk = d.cout * geo.kernel * geo.kernel;
    let p = d.oh * d.ow;
    let mut col = vec![E::zero(); kk * p];
    let mut gx = need_x.then(|| vec![E::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![E::zero(); wt.len()]);
    for b in 0..d.n {
        im2col(&g[b * d.cout * d.h * d.w..], d.cout, d.h, d.w, geo, d.oh, d.ow, &mut col);
        if let Some(gx) = gx.as_mut() {
            // gx_b (cin x p) = w (cin x kk) . col (kk x p)
            E::gemm(
                d.cin,
                kk,
                p,
                wt,
                kk as isize,
                1,
                &col,
                p as isize,
                1,
                E::zero(),
                &mut gx[b * d.cin * p..],
                p as isize,
                1,
            );
        }
        if let Some(gw) = gw.as_mut() {
            // gw (cin x kk) += x_b (cin x p) . col^T (p x kk)
            let xb = &x[b * d.cin * p..(b + 1) * d.cin * p];
            E::gemm(d.cin, p, kk, xb, p as isize, 1, &col, 1, p as isize, E::one(), gw, kk as isize, 1);
        }
    }
    (gx, gw)
}

struct ConvTranspose2dBackward {
    dims: ConvDims,
    geo: ConvGeometry,
}

impl Backward for ConvTranspose2dBackward {
    fn backward(&self, g: &Storage, inputs: &[Tensor], _out: &Tensor) -> Result<Vec<Option<Storage>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (nx, nw) = (x.requires_grad(), w.requires_grad());
        let (gx, gw) = match (g, x.storage(), w.storage()) {
            (Storage::F32(g), Storage::F32(xs), Storage::F32(ws)) => {
                let (a, b) = conv_t_backward(g, xs, ws, &self.dims, self.geo, nx, nw);
                (a.map(Storage::F32), b.map(Storage::F32))
            }
            (Storage::F64(g), Storage::F64(xs), Storage::F64(ws)) => {
                let (a, b) = conv_t_backward(g, xs, ws, &self.dims, self.geo, nx, nw);
                (a.map(Storage::F64), b.map(Storage::F64))
            }
            _ => unreachable!("conv_transpose2d inputs share a dtype"),
        };
        Ok(vec![gx, gw])
    }
}

/// Per-channel statistics saved by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var_unbiased: Vec<f64>,
}

struct BnLayout {
    n: usize,
    c: usize,
    inner: usize,
}

impl BnLayout {
    fn of(shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(TensorError::Rank { op: "batch_norm", expected: 2, got: shape.to_vec() });
        }
        Ok(BnLayout { n: shape[0], c: shape[1], inner: shape[2..].iter().product() })
    }

    fn for_channel(&self, ch: usize, mut f: impl FnMut(usize)) {
        for b in 0..self.n {
            let base = (b * self.c + ch) * self.inner;
            for i in base..base + self.inner {
                f(i);
            }
        }
    }
}

/// Normalize with the given per-channel mean / inverse std, then scale and shift.
fn bn_apply<E: Element>(x: &[E], l: &BnLayout, mean: &[f64], invstd: &[f64], gamma: &[E], beta: &[E]) -> Vec<E> {
    let mut y = vec![E::zero(); x.len()];
    for ch in 0..l.c {
        let (m, s) = (E::from_f64(mean[ch]), E::from_f64(invstd[ch]));
        let (ga, be) = (gamma[ch], beta[ch]);
        l.for_channel(ch, |i| y[i] = (x[i] - m) * s * ga + be);
    }
    y
}

struct BatchNormBackward {
    mean: Vec<f64>,
    invstd: Vec<f64>,
    training: bool,
}

fn bn_backward<E: Element>(
    g: &[E],
    x: &[E],
    gamma: &[E],
    l: &BnLayout,
    bw: &BatchNormBackward,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let mut gx = vec![E::zero(); x.len()];
    let mut gg = vec![E::zero(); l.c];
    let mut gb = vec![E::zero(); l.c];
    let m = (l.n * l.inner) as f64;
    for ch in 0..l.c {
        let (mu, s) = (bw.mean[ch], bw.invstd[ch]);
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        l.for_channel(ch, |i| {
            let gi = g[i].to_f64();
            sum_g += gi;
            sum_gx += gi * (x[i].to_f64() - mu) * s;
        });
        gb[ch] = E::from_f64(sum_g);
        gg[ch] = E::from_f64(sum_gx);
        let gam = gamma[ch].to_f64();
        if bw.training {
            l.for_channel(ch, |i| {
                let xhat = (x[i].to_f64() - mu) * s;
                gx[i] = E::from_f64(gam * s / m * (m * g[i].to_f64() - sum_g - xhat * sum_gx));
            });
        } else {
            l.for_channel(ch, |i| gx[i] = E::from_f64(g[i].to_f64() * gam * s));
        }
    }
    (gx, gg, gb)
}

impl Backward for BatchNormBackward {
    fn backward(&self, g: &Storage, inputs: &[Tensor], _out: &Tensor) -> Result<Vec<Option<Storage>>> {
        let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
        let l = BnLayout::of(x.shape())?;
        let (gx, gg, gb) = match (g, x.storage(), gamma.storage()) {
            (Storage::F32(g), Storage::F32(xs), Storage::F32(gs)) => {
                let (a, b, c) = bn_backward(g, xs, gs, &l, self);
                (Storage::F32(a), Storage::F32(b), Storage::F32(c))
            }
            (Storage::F64(g), Storage::F64(xs), Storage::F64(gs)) => {
                let (a, b, c) = bn_backward(g, xs, gs, &l, self);
                (Storage::F64(a), Storage::F64(b), Storage::F64(c))
            }
            _ => unreachable!("batch_norm inputs share a dtype"),
        };
        Ok(vec![
            x.requires_grad().then_some(gx),
            gamma.requires_grad().then_some(gg),
            beta.requires_grad().then_some(gb),
        ])
    }
}

impl Tensor {
    /// 2-D convolution of `(n, cin, h, w)` by `(cout, cin, k, k)`, no bias.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let [n, cin, h, w] = self.dims4("conv2d")?;
        let [cout, wcin, kh, kw] = weight.dims4("conv2d")?;
        if wcin != cin || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let geo = ConvGeometry { kernel: kh, stride, padding };
        let (oh, ow) = match (geo.out_size(h), geo.out_size(w)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: self.shape().to_vec(),
                    rhs: weight.shape().to_vec(),
                })
            }
        };
        let dims = ConvDims { n, cin, h, w, cout, oh, ow };
        let data = map_storage2!("conv2d", self.storage(), weight.storage(), |x, wt| conv_forward(x, wt, &dims, geo))?;
        Ok(Tensor::from_op(vec![n, cout, oh, ow], data, &[self, weight], Conv2dBackward { dims, geo }))
    }

    /// Transposed 2-D convolution of `(n, cin, h, w)` by `(cin, cout, k, k)`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Tensor> {
        let [n, cin, h, w] = self.dims4("conv_transpose2d")?;
        let [wcin, cout, kh, kw] = weight.dims4("conv_transpose2d")?;
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            lhs: self.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        };
        if wcin != cin || kh != kw || stride == 0 || output_padding >= stride {
            return Err(mismatch());
        }
        let full = |s: usize| ((s.max(1) - 1) * stride + kh + output_padding).checked_sub(2 * padding);
        let (oh, ow) = match (full(h), full(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(mismatch()),
        };
        let geo = ConvGeometry { kernel: kh, stride, padding };
        // Conv geometry from the output back to the input must reproduce (h, w).
        if geo.out_size(oh) != Some(h) || geo.out_size(ow) != Some(w) {
            return Err(mismatch());
        }
        let dims = ConvDims { n, cin, h: oh, w: ow, cout, oh: h, ow: w };
        let data = map_storage2!("conv_transpose2d", self.storage(), weight.storage(), |x, wt| conv_t_forward(
            x, wt, &dims, geo
        ))?;
        Ok(Tensor::from_op(vec![n, cout, oh, ow], data, &[self, weight], ConvTranspose2dBackward { dims, geo }))
    }

    /// Batch norm over axis 1 using the batch's own statistics.
    pub fn batch_norm_train(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, BatchStats)> {
        let l = BnLayout::of(self.shape())?;
        let x = self.to_vec_f64();
        let mut mean = vec![0.0; l.c];
        let mut var = vec![0.0; l.c];
        let m = (l.n * l.inner) as f64;
        for ch in 0..l.c {
            let mut s = 0.0;
            l.for_channel(ch, |i| s += x[i]);
            let mu = s / m;
            let mut v = 0.0;
            l.for_channel(ch, |i| v += (x[i] - mu) * (x[i] - mu));
            mean[ch] = mu;
            var[ch] = v / m;
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let var_unbiased = var.iter().map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v }).collect();
        let y = self.bn_apply(gamma, beta, &l, &mean, &invstd)?;
        let stats = BatchStats { mean: mean.clone(), var_unbiased };
        let out = Tensor::from_op(
            self.shape().to_vec(),
            y,
            &[self, gamma, beta],
            BatchNormBackward { mean, invstd, training: true },
        );
        Ok((out, stats))
    }

    /// Batch norm over axis 1 with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &Tensor,
        var: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let l = BnLayout::of(self.shape())?;
        let mean = mean.to_vec_f64();
        let invstd: Vec<f64> = var.to_vec_f64().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = self.bn_apply(gamma, beta, &l, &mean, &invstd)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            &[self, gamma, beta],
            BatchNormBackward { mean, invstd, training: false },
        ))
    }

    fn bn_apply(&self, gamma: &Tensor, beta: &Tensor, l: &BnLayout, mean: &[f64], invstd: &[f64]) -> Result<Storage> {
        if gamma.numel() != l.c || beta.numel() != l.c || mean.len() != l.c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        match (self.storage(), gamma.storage(), beta.storage()) {
            (Storage::F32(x), Storage::F32(g), Storage::F32(b)) => Ok(Storage::F32(bn_apply(x, l, mean, invstd, g, b))),
            (Storage::F64(x), Storage::F64(g), Storage::F64(b)) => Ok(Storage::F64(bn_apply(x, l, mean, invstd, g, b))),
            (x, g, _) => Err(TensorError::DTypeMismatch { op: "batch_norm", lhs: x.dtype(), rhs: g.dtype() }),
        }
    }
}
