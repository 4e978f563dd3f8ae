//! Pure tensor kernels. Every function here is a plain function of its inputs;
//! the gradient engine in `graph` wraps them and pairs each with its adjoint.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
/// Above this input, softplus returns its argument unchanged.
pub const SOFTPLUS_LINEAR_ABOVE: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    Softplus,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Exponential-moving-average statistics kept by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    /// `false` until the first train-mode update (or an explicit initialization).
    pub initialized: bool,
}

impl RunningStats {
    pub fn empty(channels: usize, momentum: f64) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
            initialized: false,
        }
    }

    /// Zero mean / unit variance, marked usable for eval mode.
    pub fn identity(channels: usize, momentum: f64) -> Self {
        RunningStats {
            initialized: true,
            ..Self::empty(channels, momentum)
        }
    }

    pub(crate) fn update(&mut self, batch_mean: &[f64], batch_var_unbiased: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var_unbiased) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.initialized = true;
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(v: f64) -> f64 {
    if v > SOFTPLUS_LINEAR_ABOVE {
        v
    } else {
        v.exp().ln_1p()
    }
}

#[inline]
fn activate(kind: Activation, v: f64) -> f64 {
    match kind {
        Activation::Relu => v.max(0.0),
        Activation::Silu => v * sigmoid(v),
        Activation::Softplus => softplus(v),
        Activation::Sigmoid => sigmoid(v),
    }
}

#[inline]
fn activate_grad(kind: Activation, v: f64) -> f64 {
    match kind {
        Activation::Relu => {
            if v > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Silu => {
            let s = sigmoid(v);
            s * (1.0 + v * (1.0 - s))
        }
        Activation::Softplus => {
            if v > SOFTPLUS_LINEAR_ABOVE {
                1.0
            } else {
                sigmoid(v)
            }
        }
        Activation::Sigmoid => {
            let s = sigmoid(v);
            s * (1.0 - s)
        }
    }
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    x.map(|v| activate(kind, v))
}

pub(crate) fn activation_backward(kind: Activation, x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * activate_grad(kind, v))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn check_vec(op: &'static str, t: &Tensor, len: usize) -> Result<()> {
    if t.rank() != 1 || t.numel() != len {
        return Err(Error::shape(op, t.shape(), &[len]));
    }
    Ok(())
}

/// `out[..., j] = sum_i x[..., i] * w[i, j] + b[j]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || x.last_dim() != w.shape()[0] {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    check_vec("linear bias", b, dout)?;
    let rows = x.numel() / din;
    let mut out = vec![0.0; rows * dout];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    for r in 0..rows {
        let orow = &mut out[r * dout..(r + 1) * dout];
        orow.copy_from_slice(bd);
        for (i, &xv) in xd[r * din..(r + 1) * din].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, &wv) in orow.iter_mut().zip(&wd[i * dout..(i + 1) * dout]) {
                *o += xv * wv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / din;
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; dout];
    for r in 0..rows {
        let grow = &gd[r * dout..(r + 1) * dout];
        for (d, g) in db.iter_mut().zip(grow) {
            *d += g;
        }
        for i in 0..din {
            let xv = xd[r * din + i];
            let wrow = &wd[i * dout..(i + 1) * dout];
            let dwrow = &mut dw[i * dout..(i + 1) * dout];
            let mut acc = 0.0;
            for j in 0..dout {
                acc += grow[j] * wrow[j];
                dwrow[j] += xv * grow[j];
            }
            dx[r * din + i] = acc;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![dout], db),
    )
}

/// Splits `[..., D, H, W, C]` into (batch, D, H, W, C).
fn grid_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let s = x.shape();
    match s.len() {
        4 => Ok((1, s[0], s[1], s[2], s[3])),
        5 => Ok((s[0], s[1], s[2], s[3], s[4])),
        _ => Err(Error::shape(op, s, &[0, 0, 0, 0])),
    }
}

/// Visits every (output voxel, kernel tap, source voxel) triple of a
/// 3x3x3 stride-1 pad-1 correlation. Arguments to `f` are flat base offsets
/// (without the channel term) of the output and source voxel, and the tap index.
fn for_each_tap(
    batch: usize,
    d: usize,
    h: usize,
    w: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    for n in 0..batch {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let out = ((n * d + z) * h + y) * w + x;
                    for kz in 0..3 {
                        let sz = z + kz;
                        if sz == 0 || sz > d {
                            continue;
                        }
                        for ky in 0..3 {
                            let sy = y + ky;
                            if sy == 0 || sy > h {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = x + kx;
                                if sx == 0 || sx > w {
                                    continue;
                                }
                                let src = ((n * d + sz - 1) * h + sy - 1) * w + sx - 1;
                                f(out, src, (kz * 3 + ky) * 3 + kx);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_conv(
    x: &Tensor,
    k: &Tensor,
    b: &Tensor,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, d, h, w, cin) = grid_dims("conv3d", x)?;
    let ks = k.shape();
    if ks.len() != 5 || ks[..3] != [3, 3, 3] || ks[3] != cin {
        return Err(Error::shape("conv3d", x.shape(), ks));
    }
    let cout = ks[4];
    check_vec("conv3d bias", b, cout)?;
    Ok((n, d, h, w, cin, cout))
}

/// 3x3x3 cross-correlation, stride 1, zero padding 1, over `[(B,) D, H, W, Cin]`.
pub fn conv3d(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d, h, w, cin, cout) = check_conv(x, k, b)?;
    let mut out = Vec::with_capacity(n * d * h * w * cout);
    for _ in 0..n * d * h * w {
        out.extend_from_slice(b.data());
    }
    let (xd, kd) = (x.data(), k.data());
    for_each_tap(n, d, h, w, |o, s, tap| {
        let orow = &mut out[o * cout..(o + 1) * cout];
        for i in 0..cin {
            let xv = xd[s * cin + i];
            if xv == 0.0 {
                continue;
            }
            let krow = &kd[(tap * cin + i) * cout..(tap * cin + i + 1) * cout];
            for (ov, kv) in orow.iter_mut().zip(krow) {
                *ov += xv * kv;
            }
        }
    });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn conv3d_backward(
    x: &Tensor,
    k: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d, h, w, cin) = grid_dims("conv3d", x)?;
    let cout = k.shape()[4];
    let (xd, kd, gd) = (x.data(), k.data(), dy.data());
    let mut dx = vec![0.0; x.numel()];
    let mut dk = vec![0.0; k.numel()];
    let mut db = vec![0.0; cout];
    for row in gd.chunks(cout) {
        for (a, g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    for_each_tap(n, d, h, w, |o, s, tap| {
        let grow = &gd[o * cout..(o + 1) * cout];
        for i in 0..cin {
            let xv = xd[s * cin + i];
            let base = (tap * cin + i) * cout;
            let krow = &kd[base..base + cout];
            let dkrow = &mut dk[base..base + cout];
            let mut acc = 0.0;
            for j in 0..cout {
                acc += grow[j] * krow[j];
                dkrow[j] += xv * grow[j];
            }
            dx[s * cin + i] += acc;
        }
    });
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(vec![cout], db),
    ))
}

/// Intermediates of a normalization, reused by the backward rule.
#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel statistics over all non-channel positions.
pub(crate) fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let c = x.last_dim();
    check_vec("batch_norm gamma", gamma, c)?;
    check_vec("batch_norm beta", beta, c)?;
    let rows = x.numel() / c;
    if rows < 2 {
        return Err(Error::invalid(format!(
            "batch_norm in train mode needs at least 2 positions per channel, got {rows}"
        )));
    }
    let xd = x.data();
    let mut mean = vec![0.0; c];
    for row in xd.chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; c];
    for row in xd.chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        for j in 0..c {
            let i = r * c + j;
            xhat[i] = (xd[i] - mean[j]) * inv_std[j];
            out[i] = gamma.data()[j] * xhat[i] + beta.data()[j];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        NormCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

pub(crate) fn batch_norm_train_backward(
    gamma: &Tensor,
    cache: &NormCache,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gamma.numel();
    let rows = dy.numel() / c;
    let m = rows as f64;
    let gd = dy.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut sum_dxhat = vec![0.0; c];
    let mut sum_dxhat_xhat = vec![0.0; c];
    for r in 0..rows {
        for j in 0..c {
            let i = r * c + j;
            dgamma[j] += gd[i] * cache.xhat[i];
            dbeta[j] += gd[i];
            let dxhat = gd[i] * gamma.data()[j];
            sum_dxhat[j] += dxhat;
            sum_dxhat_xhat[j] += dxhat * cache.xhat[i];
        }
    }
    let mut dx = vec![0.0; dy.numel()];
    for r in 0..rows {
        for j in 0..c {
            let i = r * c + j;
            let dxhat = gd[i] * gamma.data()[j];
            dx[i] = cache.inv_std[j] / m
                * (m * dxhat - sum_dxhat[j] - cache.xhat[i] * sum_dxhat_xhat[j]);
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

pub(crate) fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let c = x.last_dim();
    check_vec("batch_norm gamma", gamma, c)?;
    check_vec("batch_norm beta", beta, c)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::shape(
            "batch_norm running stats",
            x.shape(),
            &[mean.len()],
        ));
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        for j in 0..c {
            row[j] = gamma.data()[j] * (row[j] - mean[j]) * inv[j] + beta.data()[j];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn batch_norm_eval_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gamma.numel();
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut dx = vec![0.0; x.numel()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (&xv, &g)) in x.data().iter().zip(dy.data()).enumerate() {
        let j = i % c;
        dx[i] = g * gamma.data()[j] * inv[j];
        dgamma[j] += g * (xv - mean[j]) * inv[j];
        dbeta[j] += g;
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// Batch normalization over `[..., C]`. Train mode normalizes by batch
/// statistics and folds them into `stats`; eval mode reads `stats`.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    mode: BnMode,
    stats: &mut RunningStats,
) -> Result<Tensor> {
    match mode {
        BnMode::Train => {
            let (y, cache) = batch_norm_train(x, gamma, beta, eps)?;
            stats.update(&cache.mean, &unbiased(&cache.var, x.numel() / x.last_dim()));
            Ok(y)
        }
        BnMode::Eval => {
            if !stats.initialized {
                return Err(Error::MissingRunningStats);
            }
            batch_norm_eval(x, gamma, beta, &stats.mean, &stats.var, eps)
        }
    }
}

pub(crate) fn unbiased(var: &[f64], population: usize) -> Vec<f64> {
    let n = population as f64;
    var.iter().map(|v| v * n / (n - 1.0)).collect()
}

/// Normalizes each token over its last axis, then applies `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_cached(x, gamma, beta, eps)?.0)
}

pub(crate) fn layer_norm_cached(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let c = x.last_dim();
    check_vec("layer_norm gamma", gamma, c)?;
    check_vec("layer_norm beta", beta, c)?;
    let rows = x.numel() / c;
    let mut xhat = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    let mut means = vec![0.0; rows];
    let mut vars = vec![0.0; rows];
    for (r, row) in x.data().chunks(c).enumerate() {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            let i = r * c + j;
            xhat[i] = (v - mean) * inv;
            out[i] = gamma.data()[j] * xhat[i] + beta.data()[j];
        }
        inv_std[r] = inv;
        means[r] = mean;
        vars[r] = var;
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        NormCache {
            xhat,
            inv_std,
            mean: means,
            var: vars,
        },
    ))
}

pub(crate) fn layer_norm_backward(
    gamma: &Tensor,
    cache: &NormCache,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gamma.numel();
    let m = c as f64;
    let mut dx = vec![0.0; dy.numel()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (r, grow) in dy.data().chunks(c).enumerate() {
        let xh = &cache.xhat[r * c..(r + 1) * c];
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..c {
            dgamma[j] += grow[j] * xh[j];
            dbeta[j] += grow[j];
            let dxhat = grow[j] * gamma.data()[j];
            s1 += dxhat;
            s2 += dxhat * xh[j];
        }
        for j in 0..c {
            let dxhat = grow[j] * gamma.data()[j];
            dx[r * c + j] = cache.inv_std[r] / m * (m * dxhat - s1 - xh[j] * s2);
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// (outer, axis extent, inner) decomposition for reductions along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (xd[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[idx(k)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(y.shape(), axis).expect("validated in forward");
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let dot: f64 = (0..n).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
            for k in 0..n {
                dx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Mean over samples of `-log softmax(logits)[label]`, via log-sum-exp.
/// `logits` is `[K]` (one sample) or `[B, K]`. Also returns the softmax
/// probabilities, which the backward rule needs.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let k = logits.last_dim();
    let batch = logits.numel() / k;
    if logits.rank() > 2 || labels.len() != batch {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape(),
            &[labels.len(), k],
        ));
    }
    let mut probs = vec![0.0; logits.numel()];
    let mut total = 0.0;
    for (s, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        if label >= k {
            return Err(Error::invalid(format!(
                "label {label} outside class range 0..{k}"
            )));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
        for (p, v) in probs[s * k..(s + 1) * k].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    Ok((total / batch as f64, probs))
}

pub(crate) fn cross_entropy_backward(
    shape: &[usize],
    probs: &[f64],
    labels: &[usize],
    dloss: f64,
) -> Tensor {
    let k = *shape.last().unwrap();
    let batch = labels.len() as f64;
    let mut dx = probs.to_vec();
    for (s, &label) in labels.iter().enumerate() {
        dx[s * k + label] -= 1.0;
    }
    dx.iter_mut().for_each(|v| *v *= dloss / batch);
    Tensor::from_parts(shape.to_vec(), dx)
}

/// `out.flat[i] = x.flat[index[i]]`.
pub fn gather(x: &Tensor, index: &[usize], shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != index.len() {
        return Err(Error::shape("gather", &[index.len()], shape));
    }
    let n = x.numel();
    if let Some(&bad) = index.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!(
            "gather index {bad} out of range for {n} elements"
        )));
    }
    let xd = x.data();
    Ok(Tensor::from_parts(
        shape.to_vec(),
        index.iter().map(|&i| xd[i]).collect(),
    ))
}

pub(crate) fn gather_backward(x_shape: &[usize], index: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = vec![0.0; x_shape.iter().product()];
    for (&i, &g) in index.iter().zip(dy.data()) {
        dx[i] += g;
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

/// Concatenation along the last axis.
pub fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, cb) = (a.last_dim(), b.last_dim());
    let lead_a = &a.shape()[..a.rank() - 1];
    let lead_b = &b.shape()[..b.rank() - 1];
    if lead_a != lead_b {
        return Err(Error::shape("concat", a.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for (ra, rb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn concat_last_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (ca, cb) = (a.last_dim(), b.last_dim());
    let mut da = Vec::with_capacity(a.numel());
    let mut db = Vec::with_capacity(b.numel());
    for row in dy.data().chunks(ca + cb) {
        da.extend_from_slice(&row[..ca]);
        db.extend_from_slice(&row[ca..]);
    }
    (
        Tensor::from_parts(a.shape().to_vec(), da),
        Tensor::from_parts(b.shape().to_vec(), db),
    )
}

pub(crate) fn zip_same(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    ))
}

/// Mean over one axis; the axis is removed from the shape (a rank-1 input
/// yields shape `[1]`).
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn mean_axis_backward(x_shape: &[usize], axis: usize, dy: &Tensor) -> Tensor {
    let (outer, n, inner) = axis_split(x_shape, axis).expect("validated in forward");
    let gd = dy.data();
    let mut dx = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                dx[(o * n + k) * inner + i] = gd[o * inner + i] / n as f64;
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}
