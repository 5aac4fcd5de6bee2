//! Forward and backward kernels over flat row-major buffers.
//!
//! Batched kernels process samples independently (fanned out through
//! [`crate::exec`]) and reduce parameter gradients in sample order, so
//! results do not depend on the worker count.

use rand::Rng;

use super::scalar::gemm;
use super::{NnError, Scalar};
use crate::exec;

/// Geometry of a 2-D convolution over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_ch: usize,
        h: usize,
        w: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, NnError> {
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(NnError::Shape("conv kernel and stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(NnError::Shape(format!(
                "conv kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { in_ch, h, w, out_ch, kh, kw, stride, pad, oh, ow })
    }

    pub fn in_len(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.out_ch * self.oh * self.ow
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.in_ch {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation plus bias. `x` is `[batch × in_ch × h × w]`, `weight` is
/// `[out_ch × in_ch × kh × kw]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom, batch: usize) -> Vec<T> {
    let plane = g.oh * g.ow;
    let rows = g.col_rows();
    let mut out = vec![T::zero(); batch * g.out_len()];
    exec::for_each_chunk_mut(&mut out, g.out_len(), |b, o| {
        let xs = &x[b * g.in_len()..(b + 1) * g.in_len()];
        for (f, chunk) in o.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[f]);
        }
        if g.is_pointwise() {
            gemm(false, false, g.out_ch, rows, plane, T::one(), weight, xs, T::one(), o);
        } else {
            let mut cols = vec![T::zero(); rows * plane];
            im2col(xs, g, &mut cols);
            gemm(false, false, g.out_ch, rows, plane, T::one(), weight, &cols, T::one(), o);
        }
    });
    out
}

/// Gradients of a convolution. Returns `(dx, dweight, dbias)`; `dx` is only
/// computed when `want_dx`, parameter gradients only when `want_params`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    batch: usize,
    want_dx: bool,
    want_params: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.oh * g.ow;
    let rows = g.col_rows();
    let per_sample = exec::map_range(batch, |b| {
        let xs = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let dys = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        let mut dw = None;
        let mut db = None;
        if want_params {
            let mut w = vec![T::zero(); g.out_ch * rows];
            if g.is_pointwise() {
                gemm(false, true, g.out_ch, plane, rows, T::one(), dys, xs, T::zero(), &mut w);
            } else {
                let mut cols = vec![T::zero(); rows * plane];
                im2col(xs, g, &mut cols);
                gemm(false, true, g.out_ch, plane, rows, T::one(), dys, &cols, T::zero(), &mut w);
            }
            dw = Some(w);
            db = Some(dys.chunks(plane).map(|c| c.iter().copied().sum::<T>()).collect::<Vec<T>>());
        }
        let dx = if want_dx {
            let mut dxs = vec![T::zero(); g.in_len()];
            if g.is_pointwise() {
                gemm(true, false, rows, g.out_ch, plane, T::one(), weight, dys, T::zero(), &mut dxs);
            } else {
                let mut dcols = vec![T::zero(); rows * plane];
                gemm(true, false, rows, g.out_ch, plane, T::one(), weight, dys, T::zero(), &mut dcols);
                col2im(&dcols, g, &mut dxs);
            }
            Some(dxs)
        } else {
            None
        };
        (dx, dw, db)
    });

    let mut dx_all = want_dx.then(|| Vec::with_capacity(batch * g.in_len()));
    let mut dw_all = want_params.then(|| vec![T::zero(); g.out_ch * rows]);
    let mut db_all = want_params.then(|| vec![T::zero(); g.out_ch]);
    for (dx, dw, db) in per_sample {
        if let (Some(acc), Some(v)) = (dx_all.as_mut(), dx) {
            acc.extend_from_slice(&v);
        }
        if let (Some(acc), Some(v)) = (dw_all.as_mut(), dw) {
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        if let (Some(acc), Some(v)) = (db_all.as_mut(), db) {
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
    }
    (dx_all, dw_all, db_all)
}

/// Geometry of a max-pooling window over `channels` planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(channels: usize, h: usize, w: usize, size: usize, stride: usize, pad: usize) -> Result<Self, NnError> {
        if size == 0 || stride == 0 || pad >= size {
            return Err(NnError::Shape("invalid pooling window".into()));
        }
        if h + 2 * pad < size || w + 2 * pad < size {
            return Err(NnError::Shape(format!("pool window {size} larger than input {h}x{w}")));
        }
        let oh = (h + 2 * pad - size) / stride + 1;
        let ow = (w + 2 * pad - size) / stride + 1;
        Ok(PoolGeom { channels, h, w, size, stride, pad, oh, ow })
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.channels * self.oh * self.ow
    }
}

/// Max pooling; padded positions never win. Returns the output and, for each
/// output cell, the flat in-sample index of the winning input (first on ties).
pub fn maxpool_forward<T: Scalar>(x: &[T], g: &PoolGeom, batch: usize) -> (Vec<T>, Vec<u32>) {
    let mut out = vec![T::zero(); batch * g.out_len()];
    let mut arg = vec![0u32; batch * g.out_len()];
    for b in 0..batch {
        let xs = &x[b * g.in_len()..(b + 1) * g.in_len()];
        for c in 0..g.channels {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    let mut found = false;
                    for ki in 0..g.size {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.size {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let idx = (c * g.h + iy as usize) * g.w + ix as usize;
                            if !found || xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                                found = true;
                            }
                        }
                    }
                    let o = b * g.out_len() + (c * g.oh + oy) * g.ow + ox;
                    out[o] = best;
                    arg[o] = best_idx as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(dy: &[T], arg: &[u32], g: &PoolGeom, batch: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); batch * g.in_len()];
    for b in 0..batch {
        for o in 0..g.out_len() {
            let i = b * g.out_len() + o;
            dx[b * g.in_len() + arg[i] as usize] += dy[i];
        }
    }
    dx
}

/// Spatial mean of each channel: `[B×C×H×W] -> [B×C]`.
pub fn gap_forward<T: Scalar>(x: &[T], batch: usize, channels: usize, spatial: usize) -> Vec<T> {
    let inv = T::one() / T::of(spatial as f64);
    (0..batch * channels)
        .map(|i| x[i * spatial..(i + 1) * spatial].iter().copied().sum::<T>() * inv)
        .collect()
}

pub fn gap_backward<T: Scalar>(dy: &[T], batch: usize, channels: usize, spatial: usize) -> Vec<T> {
    let inv = T::one() / T::of(spatial as f64);
    let mut dx = Vec::with_capacity(batch * channels * spatial);
    for &g in dy.iter().take(batch * channels) {
        dx.extend(std::iter::repeat_n(g * inv, spatial));
    }
    dx
}

/// Cached state of a batch-norm forward pass needed for backward.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Batch normalization over `[B × C × spatial]`. In batch-stat mode the
/// per-channel biased mean/variance of the batch are used; otherwise the
/// supplied running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
    batch_stats: bool,
) -> Result<(Vec<T>, BnCache<T>), NnError> {
    if batch_stats && batch < 2 {
        return Err(NnError::BatchTooSmall);
    }
    let n = T::of((batch * spatial) as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    if batch_stats {
        for c in 0..channels {
            let mut s = T::zero();
            for b in 0..batch {
                let o = (b * channels + c) * spatial;
                s += x[o..o + spatial].iter().copied().sum::<T>();
            }
            let m = s / n;
            let mut v = T::zero();
            for b in 0..batch {
                let o = (b * channels + c) * spatial;
                v += x[o..o + spatial].iter().map(|&xi| (xi - m) * (xi - m)).sum::<T>();
            }
            mean[c] = m;
            var[c] = v / n;
        }
    } else {
        mean.copy_from_slice(running_mean);
        var.copy_from_slice(running_var);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let o = (b * channels + c) * spatial;
            for i in o..o + spatial {
                xhat[i] = (x[i] - mean[c]) * inv_std[c];
                y[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    Ok((y, BnCache { xhat, inv_std, batch_stats, batch_mean: mean, batch_var: var }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    dy: &[T],
    cache: &BnCache<T>,
    gamma: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::of((batch * spatial) as f64);
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let o = (b * channels + c) * spatial;
            for i in o..o + spatial {
                dgamma[c] += dy[i] * cache.xhat[i];
                dbeta[c] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..batch {
        for c in 0..channels {
            let o = (b * channels + c) * spatial;
            for i in o..o + spatial {
                dx[i] = if cache.batch_stats {
                    // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                    gamma[c] * cache.inv_std[c] * (dy[i] - dbeta[c] / n - cache.xhat[i] * dgamma[c] / n)
                } else {
                    gamma[c] * cache.inv_std[c] * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// `y[B×out] = x[B×in] · W[in×out] + b`.
pub fn dense_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], batch: usize, inp: usize, out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * out);
    for _ in 0..batch {
        y.extend_from_slice(b);
    }
    gemm(false, false, batch, inp, out, T::one(), x, w, T::one(), &mut y);
    y
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    batch: usize,
    inp: usize,
    out: usize,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); inp * out];
    gemm(true, false, inp, batch, out, T::one(), x, dy, T::zero(), &mut dw);
    let mut db = vec![T::zero(); out];
    for r in dy.chunks(out) {
        db.iter_mut().zip(r).for_each(|(a, &g)| *a += g);
    }
    let dx = want_dx.then(|| {
        let mut dx = vec![T::zero(); batch * inp];
        gemm(false, true, batch, out, inp, T::one(), dy, w, T::zero(), &mut dx);
        dx
    });
    (dx, dw, db)
}

pub fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Gradient of ReLU given its *output*.
pub fn relu_backward<T: Scalar>(y: &[T], dy: &[T]) -> Vec<T> {
    y.iter().zip(dy).map(|(&o, &g)| if o > T::zero() { g } else { T::zero() }).collect()
}

/// Row-wise numerically stable softmax over `[rows × classes]`.
pub fn softmax_rows<T: Scalar>(z: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Vector-Jacobian product of softmax given its output `p`.
pub fn softmax_backward<T: Scalar>(p: &[T], dp: &[T], classes: usize) -> Vec<T> {
    let mut dz = Vec::with_capacity(p.len());
    for (pr, gr) in p.chunks(classes).zip(dp.chunks(classes)) {
        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dz.extend(pr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    dz
}

/// Inverted-dropout mask: each unit kept with probability `1 − p` and scaled
/// by `1/(1 − p)`; dropped units get 0.
pub fn dropout_mask<T: Scalar>(len: usize, p: f64, rng: &mut impl Rng) -> Result<Vec<T>, NnError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NnError::InvalidParam(format!("dropout fraction {p} outside [0, 1)")));
    }
    let keep = T::of(1.0 / (1.0 - p));
    Ok((0..len)
        .map(|_| if p > 0.0 && rng.random::<f64>() < p { T::zero() } else { keep })
        .collect())
}

/// `dropout_forward(x, P, rng, training)`: identity at inference.
pub fn dropout_forward<T: Scalar>(x: &[T], p: f64, rng: &mut impl Rng, training: bool) -> Result<Vec<T>, NnError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NnError::InvalidParam(format!("dropout fraction {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x.to_vec());
    }
    let mask = dropout_mask::<T>(x.len(), p, rng)?;
    Ok(x.iter().zip(&mask).map(|(&a, &m)| a * m).collect())
}

/// Channel concatenation of `[B × C_i × spatial]` inputs.
pub fn concat_forward<T: Scalar>(inputs: &[&[T]], channels: &[usize], batch: usize, spatial: usize) -> Vec<T> {
    let total: usize = channels.iter().sum();
    let mut out = Vec::with_capacity(batch * total * spatial);
    for b in 0..batch {
        for (x, &c) in inputs.iter().zip(channels) {
            out.extend_from_slice(&x[b * c * spatial..(b + 1) * c * spatial]);
        }
    }
    out
}

pub fn concat_backward<T: Scalar>(dy: &[T], channels: &[usize], batch: usize, spatial: usize) -> Vec<Vec<T>> {
    let total: usize = channels.iter().sum();
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(batch * c * spatial)).collect();
    for b in 0..batch {
        let mut off = b * total * spatial;
        for (p, &c) in parts.iter_mut().zip(channels) {
            p.extend_from_slice(&dy[off..off + c * spatial]);
            off += c * spatial;
        }
    }
    parts
}
