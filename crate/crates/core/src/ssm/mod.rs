//! Selective state space primitive.
//!
//! Each of the `E` model channels carries its own `N`-dimensional state:
//!
//! ```text
//! delta_t = softplus(x_t W_delta + b_delta)        [E]
//! B_t = x_t W_B,  C_t = x_t W_C                    [N]
//! A_bar[e, n] = exp(delta_t[e] * A[n])
//! h_t[e, n] = A_bar[e, n] * h_{t-1}[e, n] + delta_t[e] * B_t[n] * x_t[e]
//! y_t[e] = <C_t, h_t[e, :]> + D[e] * x_t[e]
//! ```
//!
//! `A` is diagonal and strictly negative so every `A_bar` lies in `(0, 1)`.

pub(crate) mod kernel;
pub mod oracle;
pub mod scan;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use oracle::unrolled_oracle;
pub use scan::{scan_parallel, scan_sequential, ScanElement};

use crate::error::{Error, Result};
use crate::tensor::ops::softplus;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

/// Diagonal approximation of the HiPPO state matrix: `A[n] = -(n + 1)`.
pub fn hippo_diag_init(state_dim: usize) -> Result<Vec<f64>> {
    if state_dim == 0 {
        return Err(Error::invalid("state dimension must be at least 1"));
    }
    Ok((0..state_dim).map(|n| -((n + 1) as f64)).collect())
}

/// Parameters of one selective scan.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    a: Tensor,
    w_delta: Tensor,
    b_delta: Tensor,
    w_b: Tensor,
    w_c: Tensor,
    d: Tensor,
}

impl SsmParams {
    pub fn new(
        a: Vec<f64>,
        w_delta: Tensor,
        b_delta: Tensor,
        w_b: Tensor,
        w_c: Tensor,
        d: Tensor,
    ) -> Result<Self> {
        let a = Tensor::from_vec(a)?;
        let model = d.numel();
        let probe = Tensor::zeros([1, model]);
        kernel::check_shapes(&probe, &a, &w_delta, &b_delta, &w_b, &w_c, &d)?;
        Ok(SsmParams {
            a,
            w_delta,
            b_delta,
            w_b,
            w_c,
            d,
        })
    }

    /// HiPPO-diagonal `A`, Gaussian projections scaled by `1/sqrt(E)`, unit
    /// skip, and `b_delta` chosen so the initial step sizes are spread
    /// log-uniformly over `[1e-3, 1e-1]`.
    pub fn init<R: Rng + ?Sized>(model_dim: usize, state_dim: usize, rng: &mut R) -> Result<Self> {
        if model_dim == 0 {
            return Err(Error::invalid("model dimension must be at least 1"));
        }
        let a = hippo_diag_init(state_dim)?;
        let std = 1.0 / (model_dim as f64).sqrt();
        let b_delta = (0..model_dim)
            .map(|_| {
                let dt: f64 = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                dt.exp_m1().ln()
            })
            .collect();
        let mut randn = |shape: [usize; 2], s: f64| {
            let data = (0..shape[0] * shape[1])
                .map(|_| {
                    s * {
                        let v: f64 = StandardNormal.sample(rng);
                        v
                    }
                })
                .collect();
            Tensor::new(shape, data)
        };
        Self::new(
            a,
            randn([model_dim, model_dim], 0.1 * std)?,
            Tensor::from_vec(b_delta)?,
            randn([model_dim, state_dim], std)?,
            randn([model_dim, state_dim], std)?,
            Tensor::ones([model_dim]),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.numel()
    }

    pub fn model_dim(&self) -> usize {
        self.d.numel()
    }

    pub fn a(&self) -> &[f64] {
        self.a.data()
    }

    pub fn a_tensor(&self) -> &Tensor {
        &self.a
    }

    pub fn w_delta(&self) -> &Tensor {
        &self.w_delta
    }

    pub fn b_delta(&self) -> &Tensor {
        &self.b_delta
    }

    pub fn w_b(&self) -> &Tensor {
        &self.w_b
    }

    pub fn w_c(&self) -> &Tensor {
        &self.w_c
    }

    pub fn d(&self) -> &Tensor {
        &self.d
    }
}

/// Input-dependent quantities for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    /// Step size per channel, `[E]`, always positive.
    pub delta: Vec<f64>,
    /// Input matrix `[N]`.
    pub b: Vec<f64>,
    /// Output matrix `[N]`.
    pub c: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn project_token(
    x_t: &[f64],
    w_delta: &Tensor,
    b_delta: &Tensor,
    w_b: &Tensor,
    w_c: &Tensor,
    z: &mut [f64],
    delta: &mut [f64],
    b: &mut [f64],
    c: &mut [f64],
) {
    let e = x_t.len();
    let n = b.len();
    z.copy_from_slice(b_delta.data());
    b.iter_mut().for_each(|v| *v = 0.0);
    c.iter_mut().for_each(|v| *v = 0.0);
    for (i, &xv) in x_t.iter().enumerate() {
        for (zj, &w) in z.iter_mut().zip(&w_delta.data()[i * e..(i + 1) * e]) {
            *zj += xv * w;
        }
        for s in 0..n {
            b[s] += xv * w_b.data()[i * n + s];
            c[s] += xv * w_c.data()[i * n + s];
        }
    }
    for (d, &zv) in delta.iter_mut().zip(z.iter()) {
        *d = softplus(zv);
    }
}

pub fn selective_projections(x_t: &[f64], params: &SsmParams) -> Result<Projections> {
    let (e, n) = (params.model_dim(), params.state_dim());
    if x_t.len() != e {
        return Err(Error::shape("selective_projections", &[x_t.len()], &[e]));
    }
    let mut z = vec![0.0; e];
    let mut p = Projections {
        delta: vec![0.0; e],
        b: vec![0.0; n],
        c: vec![0.0; n],
    };
    project_token(
        x_t,
        &params.w_delta,
        &params.b_delta,
        &params.w_b,
        &params.w_c,
        &mut z,
        &mut p.delta,
        &mut p.b,
        &mut p.c,
    );
    Ok(p)
}

#[inline]
pub(crate) fn discretize_into(
    a: &[f64],
    b_t: &[f64],
    delta: f64,
    a_bar: &mut [f64],
    b_bar: &mut [f64],
) {
    for s in 0..a.len() {
        a_bar[s] = (delta * a[s]).exp();
        b_bar[s] = delta * b_t[s];
    }
}

/// `A_bar = exp(delta * A)`, `B_bar = delta * B_t` for one channel's step size.
pub fn discretize(a: &[f64], b_t: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if delta < 0.0 || !delta.is_finite() {
        return Err(Error::invalid(format!(
            "step size must be a non-negative finite number, got {delta}"
        )));
    }
    if a.len() != b_t.len() {
        return Err(Error::shape("discretize", &[a.len()], &[b_t.len()]));
    }
    if let Some(bad) = a.iter().find(|&&v| v >= 0.0) {
        return Err(Error::invalid(format!(
            "state matrix entries must be negative, found {bad}"
        )));
    }
    let mut a_bar = vec![0.0; a.len()];
    let mut b_bar = vec![0.0; a.len()];
    discretize_into(a, b_t, delta, &mut a_bar, &mut b_bar);
    Ok((a_bar, b_bar))
}

/// `y_t = <C_t, h_t> + D * x_t` for one channel.
pub fn ssm_output(h_t: &[f64], c_t: &[f64], d: f64, x_t: f64) -> Result<f64> {
    if h_t.len() != c_t.len() {
        return Err(Error::shape("ssm_output", &[h_t.len()], &[c_t.len()]));
    }
    Ok(h_t.iter().zip(c_t).map(|(h, c)| h * c).sum::<f64>() + d * x_t)
}

/// Hidden states `[L, E, N]` and outputs `[L, E]` of a selective scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput {
    pub h: Tensor,
    pub y: Tensor,
}

/// Runs the selective scan over `x: [L, E]`, composing the primitives above
/// token by token. `h_0 = 0`.
pub fn selective_scan_states(x: &Tensor, params: &SsmParams, mode: ScanMode) -> Result<ScanOutput> {
    let (e, n) = (params.model_dim(), params.state_dim());
    if x.rank() != 2 || x.shape()[1] != e {
        return Err(Error::shape("selective_scan", x.shape(), &[0, e]));
    }
    let len = x.shape()[0];
    let mut a_bar = vec![0.0; len * e * n];
    let mut u = vec![0.0; len * e * n];
    let mut cs = Vec::with_capacity(len);
    for t in 0..len {
        let xt = &x.data()[t * e..(t + 1) * e];
        let p = selective_projections(xt, params)?;
        for (ch, &xc) in xt.iter().enumerate() {
            let (ab, bb) = discretize(params.a(), &p.b, p.delta[ch])?;
            let k = (t * e + ch) * n;
            a_bar[k..k + n].copy_from_slice(&ab);
            for (us, &bs) in u[k..k + n].iter_mut().zip(&bb) {
                *us = bs * xc;
            }
        }
        cs.push(p.c);
    }
    let h = match mode {
        ScanMode::Sequential => scan_sequential(&a_bar, &u, e * n, None)?,
        ScanMode::Parallel => scan_parallel(&a_bar, &u, e * n, None)?,
    };
    let mut y = vec![0.0; len * e];
    for t in 0..len {
        for ch in 0..e {
            let k = (t * e + ch) * n;
            y[t * e + ch] = ssm_output(
                &h[k..k + n],
                &cs[t],
                params.d.data()[ch],
                x.data()[t * e + ch],
            )?;
        }
    }
    Ok(ScanOutput {
        h: Tensor::new([len, e, n], h)?,
        y: Tensor::new([len, e], y)?,
    })
}

pub fn selective_scan(x: &Tensor, params: &SsmParams, mode: ScanMode) -> Result<Tensor> {
    Ok(selective_scan_states(x, params, mode)?.y)
}

/// Sensitivity of the state at step `T` to the input injected at step 1,
/// `prod_{r=2..T} A_bar_r`, for `T = 1..=L` (one state entry). The first
/// entry is the empty product.
pub fn early_token_sensitivity(a_bar: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a_bar.len());
    let mut prod = 1.0;
    for (t, &a) in a_bar.iter().enumerate() {
        if t > 0 {
            prod *= a;
        }
        out.push(prod);
    }
    out
}
