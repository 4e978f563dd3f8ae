//! Wall-clock scaling of quadratic attention against the selective scan.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ssm::{kernel, ScanMode, SsmParams};
use crate::tensor::ops;
use crate::tensor::Tensor;

type Workload = Box<dyn Fn() + Send + Sync>;

/// Single-head `softmax(Q K^T / sqrt(E)) V` with `Q = x Wq`, `K = x Wk`,
/// `V = x Wv`, materializing the full `L x L` weight matrix.
pub fn reference_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape("reference_attention", x.shape(), &[0, 0]));
    }
    let e = x.shape()[1];
    for w in [wq, wk, wv] {
        if w.shape() != [e, e] {
            return Err(Error::shape(
                "reference_attention weights",
                w.shape(),
                &[e, e],
            ));
        }
    }
    let zero = Tensor::zeros([e]);
    let q = ops::linear(x, wq, &zero)?;
    let k = ops::linear(x, wk, &zero)?;
    let v = ops::linear(x, wv, &zero)?;
    let weights = attention_weights(q.data(), k.data(), x.shape()[0], e);
    Tensor::new(
        x.shape().to_vec(),
        apply_weights(&weights, v.data(), x.shape()[0], e),
    )
}

/// Row-stochastic `L x L` matrix `softmax(Q K^T / sqrt(E))`.
pub fn attention_weights(q: &[f64], k: &[f64], len: usize, dim: usize) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    let mut w = vec![0.0; len * len];
    for i in 0..len {
        let qi = &q[i * dim..(i + 1) * dim];
        let row = &mut w[i * len..(i + 1) * len];
        for (j, r) in row.iter_mut().enumerate() {
            let kj = &k[j * dim..(j + 1) * dim];
            *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for r in row.iter_mut() {
            *r = (*r - m).exp();
            total += *r;
        }
        row.iter_mut().for_each(|r| *r /= total);
    }
    w
}

fn apply_weights(w: &[f64], v: &[f64], len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for i in 0..len {
        let o = &mut out[i * dim..(i + 1) * dim];
        for j in 0..len {
            let wij = w[i * len + j];
            for (ov, vv) in o.iter_mut().zip(&v[j * dim..(j + 1) * dim]) {
                *ov += wij * vv;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Attention,
    ScanSequential,
    ScanParallel,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [
        Mechanism::Attention,
        Mechanism::ScanSequential,
        Mechanism::ScanParallel,
    ];
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Attention => "attention",
            Mechanism::ScanSequential => "scan_sequential",
            Mechanism::ScanParallel => "scan_parallel",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub len: usize,
    pub median_seconds: f64,
    pub model_dim: usize,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub model_dim: usize,
    pub state_dim: usize,
    pub repetitions: usize,
    /// Each repetition loops the call until at least this much time passes.
    pub min_rep_seconds: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![256, 512, 1024, 2048, 4096],
            model_dim: 16,
            state_dim: 16,
            repetitions: 9,
            min_rep_seconds: 0.05,
            seed: 0,
        }
    }
}

/// Inner loop count so one repetition of `f` lasts at least `min_seconds`.
fn calibrate(min_seconds: f64, f: &dyn Fn()) -> usize {
    let start = Instant::now();
    f();
    let once = start.elapsed().as_secs_f64().max(1e-9);
    ((min_seconds / once).ceil() as usize).max(1)
}

/// Times the mixing step of each mechanism at every length. Projections that
/// both sides share (`Q/K/V` versus the input itself) are prepared outside
/// the timed region; everything runs on a one-thread pool. The sequential
/// scan is the cache-free inference recurrence, the parallel scan the
/// training kernel with its adjoint caches.
///
/// Repetitions are interleaved: each round times every (length, mechanism)
/// case once, so slow drift of the host hits all lengths alike. The record
/// holds the median per-call time over rounds.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.repetitions < 5 {
        return Err(Error::invalid("bench needs at least 5 repetitions"));
    }
    if cfg.lengths.is_empty() || cfg.lengths.contains(&0) {
        return Err(Error::invalid("bench lengths must be positive"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let e = cfg.model_dim;
    let params = SsmParams::init(e, cfg.state_dim, &mut rng)?;
    let mut cases: Vec<(usize, Mechanism, Workload)> = Vec::new();
    for &len in &cfg.lengths {
        let x = Tensor::randn([len, e], 1.0, &mut rng);
        let q = Tensor::randn([len, e], 1.0, &mut rng);
        let k = Tensor::randn([len, e], 1.0, &mut rng);
        let v = Tensor::randn([len, e], 1.0, &mut rng);
        cases.push((
            len,
            Mechanism::Attention,
            Box::new(move || {
                let w = attention_weights(q.data(), k.data(), len, e);
                std::hint::black_box(apply_weights(&w, v.data(), len, e));
            }),
        ));
        let (xs, p) = (x.clone(), params.clone());
        cases.push((
            len,
            Mechanism::ScanSequential,
            Box::new(move || {
                let r = kernel::forward_streaming(
                    &xs,
                    p.a_tensor(),
                    p.w_delta(),
                    p.b_delta(),
                    p.w_b(),
                    p.w_c(),
                    p.d(),
                );
                std::hint::black_box(r.ok());
            }),
        ));
        let p = params.clone();
        cases.push((
            len,
            Mechanism::ScanParallel,
            Box::new(move || {
                let r = kernel::forward(
                    &x,
                    p.a_tensor(),
                    p.w_delta(),
                    p.b_delta(),
                    p.w_b(),
                    p.w_c(),
                    p.d(),
                    ScanMode::Parallel,
                );
                std::hint::black_box(r.map(|(y, _)| y).ok());
            }),
        ));
    }
    let samples = pool.install(|| {
        let iters: Vec<usize> = cases
            .iter()
            .map(|(_, _, f)| calibrate(cfg.min_rep_seconds, f.as_ref()))
            .collect();
        let mut samples = vec![Vec::with_capacity(cfg.repetitions); cases.len()];
        for _ in 0..cfg.repetitions {
            for (i, (_, _, f)) in cases.iter().enumerate() {
                let start = Instant::now();
                for _ in 0..iters[i] {
                    f();
                }
                samples[i].push(start.elapsed().as_secs_f64() / iters[i] as f64);
            }
        }
        samples
    });
    Ok(cases
        .iter()
        .zip(samples)
        .map(|((len, mech, _), mut s)| {
            s.sort_by(f64::total_cmp);
            BenchRecord {
                mechanism: *mech,
                len: *len,
                median_seconds: s[s.len() / 2],
                model_dim: e,
            }
        })
        .collect())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("slope fit needs at least two points"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("slope fit needs distinct lengths"));
    }
    Ok(sxy / sxx)
}

/// Slope over the upper half of the length ladder (at least two points).
pub fn fitted_slope(records: &[BenchRecord], mech: Mechanism) -> Result<f64> {
    let mut pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.mechanism == mech)
        .map(|r| (r.len as f64, r.median_seconds))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let start = (pts.len() / 2).min(pts.len().saturating_sub(2));
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts[start..].iter().copied().unzip();
    loglog_slope(&xs, &ys)
}

pub fn write_csv<W: Write>(mut w: W, records: &[BenchRecord]) -> Result<()> {
    writeln!(w, "mechanism,L,median_seconds")?;
    for r in records {
        writeln!(w, "{},{},{:e}", r.mechanism, r.len, r.median_seconds)?;
    }
    Ok(())
}
