//! Fused selective scan with a hand-derived adjoint, used by the gradient
//! engine. Inputs follow `Graph::selective_scan`.

use super::{discretize_into, project_token, scan, ScanMode};
use crate::error::{Error, Result};
use crate::tensor::ops::{self, sigmoid, SOFTPLUS_LINEAR_ABOVE};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct ItemCache {
    z: Vec<f64>,
    delta: Vec<f64>,
    bm: Vec<f64>,
    cm: Vec<f64>,
    abar: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct ScanCache {
    items: Vec<ItemCache>,
}

pub(crate) struct Dims {
    pub batch: usize,
    pub len: usize,
    pub model: usize,
    pub state: usize,
}

pub(crate) fn check_shapes(
    x: &Tensor,
    a: &Tensor,
    w_delta: &Tensor,
    b_delta: &Tensor,
    w_b: &Tensor,
    w_c: &Tensor,
    d: &Tensor,
) -> Result<Dims> {
    let (batch, len, model) = match x.shape() {
        [l, e] => (1, *l, *e),
        [b, l, e] => (*b, *l, *e),
        s => return Err(Error::shape("selective_scan input", s, &[0, 0])),
    };
    if a.rank() != 1 {
        return Err(Error::shape("selective_scan A", a.shape(), &[0]));
    }
    let state = a.numel();
    if let Some(bad) = a.data().iter().find(|&&v| v >= 0.0) {
        return Err(Error::invalid(format!(
            "state matrix entries must be negative, found {bad}"
        )));
    }
    let want = |op: &'static str, t: &Tensor, s: &[usize]| {
        if t.shape() == s {
            Ok(())
        } else {
            Err(Error::shape(op, t.shape(), s))
        }
    };
    want("selective_scan W_delta", w_delta, &[model, model])?;
    want("selective_scan b_delta", b_delta, &[model])?;
    want("selective_scan W_B", w_b, &[model, state])?;
    want("selective_scan W_C", w_c, &[model, state])?;
    want("selective_scan D", d, &[model])?;
    Ok(Dims {
        batch,
        len,
        model,
        state,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward(
    x: &Tensor,
    a: &Tensor,
    w_delta: &Tensor,
    b_delta: &Tensor,
    w_b: &Tensor,
    w_c: &Tensor,
    d: &Tensor,
    mode: ScanMode,
) -> Result<(Tensor, ScanCache)> {
    let Dims {
        batch,
        len,
        model: e,
        state: n,
    } = check_shapes(x, a, w_delta, b_delta, w_b, w_c, d)?;
    let mut y = vec![0.0; x.numel()];
    let mut items = Vec::with_capacity(batch);
    for item in 0..batch {
        let xs = &x.data()[item * len * e..(item + 1) * len * e];
        let mut z = vec![0.0; len * e];
        let mut delta = vec![0.0; len * e];
        let mut bm = vec![0.0; len * n];
        let mut cm = vec![0.0; len * n];
        let mut abar = vec![0.0; len * e * n];
        let mut u = vec![0.0; len * e * n];
        for t in 0..len {
            let xt = &xs[t * e..(t + 1) * e];
            project_token(
                xt,
                w_delta,
                b_delta,
                w_b,
                w_c,
                &mut z[t * e..(t + 1) * e],
                &mut delta[t * e..(t + 1) * e],
                &mut bm[t * n..(t + 1) * n],
                &mut cm[t * n..(t + 1) * n],
            );
            for ch in 0..e {
                let k = (t * e + ch) * n;
                discretize_into(
                    a.data(),
                    &bm[t * n..(t + 1) * n],
                    delta[t * e + ch],
                    &mut abar[k..k + n],
                    &mut u[k..k + n],
                );
                u[k..k + n].iter_mut().for_each(|v| *v *= xt[ch]);
            }
        }
        let h = match mode {
            ScanMode::Sequential => scan::scan_sequential(&abar, &u, e * n, None)?,
            ScanMode::Parallel => scan::scan_parallel(&abar, &u, e * n, None)?,
        };
        let ys = &mut y[item * len * e..(item + 1) * len * e];
        for t in 0..len {
            for ch in 0..e {
                let k = (t * e + ch) * n;
                let readout: f64 = cm[t * n..(t + 1) * n]
                    .iter()
                    .zip(&h[k..k + n])
                    .map(|(c, h)| c * h)
                    .sum();
                ys[t * e + ch] = readout + d.data()[ch] * xs[t * e + ch];
            }
        }
        items.push(ItemCache {
            z,
            delta,
            bm,
            cm,
            abar,
            h,
        });
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        ScanCache { items },
    ))
}

/// Left-to-right forward keeping only the current `[E, N]` state, for
/// callers that never run the adjoint. Bitwise equal to sequential
/// [`forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_streaming(
    x: &Tensor,
    a: &Tensor,
    w_delta: &Tensor,
    b_delta: &Tensor,
    w_b: &Tensor,
    w_c: &Tensor,
    d: &Tensor,
) -> Result<Tensor> {
    let Dims {
        batch,
        len,
        model: e,
        state: n,
    } = check_shapes(x, a, w_delta, b_delta, w_b, w_c, d)?;
    let mut y = vec![0.0; x.numel()];
    let mut z = vec![0.0; e];
    let mut delta = vec![0.0; e];
    let mut bm = vec![0.0; n];
    let mut cm = vec![0.0; n];
    let mut abar = vec![0.0; n];
    let mut u = vec![0.0; n];
    let mut h = vec![0.0; e * n];
    for item in 0..batch {
        let xs = &x.data()[item * len * e..(item + 1) * len * e];
        let ys = &mut y[item * len * e..(item + 1) * len * e];
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..len {
            let xt = &xs[t * e..(t + 1) * e];
            project_token(
                xt, w_delta, b_delta, w_b, w_c, &mut z, &mut delta, &mut bm, &mut cm,
            );
            for ch in 0..e {
                discretize_into(a.data(), &bm, delta[ch], &mut abar, &mut u);
                let hc = &mut h[ch * n..(ch + 1) * n];
                for j in 0..n {
                    hc[j] = abar[j] * hc[j] + u[j] * xt[ch];
                }
                let readout: f64 = cm.iter().zip(hc.iter()).map(|(c, h)| c * h).sum();
                ys[t * e + ch] = readout + d.data()[ch] * xt[ch];
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Gradients for `[x, A, W_delta, b_delta, W_B, W_C, D]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    x: &Tensor,
    a: &Tensor,
    w_delta: &Tensor,
    w_b: &Tensor,
    w_c: &Tensor,
    d: &Tensor,
    cache: &ScanCache,
    dy: &Tensor,
) -> Vec<Tensor> {
    let e = *x.shape().last().unwrap();
    let n = a.numel();
    let len = cache.items.first().map_or(0, |c| c.delta.len() / e);
    let mut dx = vec![0.0; x.numel()];
    let mut da = vec![0.0; n];
    let mut dwd = Tensor::zeros([e, e]);
    let mut dbd = Tensor::zeros([e]);
    let mut dwb = Tensor::zeros([e, n]);
    let mut dwc = Tensor::zeros([e, n]);
    let mut dd = vec![0.0; e];

    for (item, c) in cache.items.iter().enumerate() {
        let off = item * len * e;
        let xs = &x.data()[off..off + len * e];
        let gy = &dy.data()[off..off + len * e];
        let dxs = &mut dx[off..off + len * e];

        let mut ddelta = vec![0.0; len * e];
        let mut dbm = vec![0.0; len * n];
        let mut dcm = vec![0.0; len * n];
        let mut carry = vec![0.0; e * n];

        for t in (0..len).rev() {
            for ch in 0..e {
                let g_y = gy[t * e + ch];
                let xv = xs[t * e + ch];
                let dl = c.delta[t * e + ch];
                dd[ch] += g_y * xv;
                dxs[t * e + ch] += g_y * d.data()[ch];
                let k = (t * e + ch) * n;
                let mut ddl = 0.0;
                let mut dxv = 0.0;
                for s in 0..n {
                    let h = c.h[k + s];
                    dcm[t * n + s] += g_y * h;
                    // total adjoint of h_t: readout plus the carried future term
                    let gh = g_y * c.cm[t * n + s] + carry[ch * n + s];
                    let h_prev = if t > 0 { c.h[k + s - e * n] } else { 0.0 };
                    let abar = c.abar[k + s];
                    let dabar = gh * h_prev;
                    ddl += dabar * abar * a.data()[s] + gh * c.bm[t * n + s] * xv;
                    da[s] += dabar * abar * dl;
                    dbm[t * n + s] += gh * dl * xv;
                    dxv += gh * dl * c.bm[t * n + s];
                    carry[ch * n + s] = abar * gh;
                }
                dxs[t * e + ch] += dxv;
                ddelta[t * e + ch] = ddl;
            }
        }

        let dz: Vec<f64> = ddelta
            .iter()
            .zip(&c.z)
            .map(|(g, &z)| {
                g * if z > SOFTPLUS_LINEAR_ABOVE {
                    1.0
                } else {
                    sigmoid(z)
                }
            })
            .collect();
        let x_item = Tensor::from_parts(vec![len, e], xs.to_vec());
        let (gx, gw, gb) =
            ops::linear_backward(&x_item, w_delta, &Tensor::from_parts(vec![len, e], dz));
        accumulate(dxs, gx.data());
        dwd.add_assign(&gw);
        dbd.add_assign(&gb);
        let (gx, gw, _) =
            ops::linear_backward(&x_item, w_b, &Tensor::from_parts(vec![len, n], dbm));
        accumulate(dxs, gx.data());
        dwb.add_assign(&gw);
        let (gx, gw, _) =
            ops::linear_backward(&x_item, w_c, &Tensor::from_parts(vec![len, n], dcm));
        accumulate(dxs, gx.data());
        dwc.add_assign(&gw);
    }

    vec![
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![n], da),
        dwd,
        dbd,
        dwb,
        dwc,
        Tensor::from_parts(vec![e], dd),
    ]
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
