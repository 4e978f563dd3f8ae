//! Randomized agreement check between the two scan evaluations and the
//! unrolled oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ssm::oracle::MAX_ORACLE_LEN;
use crate::ssm::{
    scan_parallel, scan_sequential, selective_scan, unrolled_oracle, ScanMode, SsmParams,
};
use crate::tensor::Tensor;

pub const SCAN_TOLERANCE: f64 = 1e-10;
pub const ORACLE_TOLERANCE: f64 = 1e-8;
/// Oracle comparisons are limited to this length (the oracle is quadratic).
pub const ORACLE_MAX_LEN: usize = 64;

#[derive(Clone, Debug)]
pub struct ScanCheckConfig {
    pub trials: usize,
    pub max_len: usize,
    pub max_state: usize,
    pub seed: u64,
}

impl Default for ScanCheckConfig {
    fn default() -> Self {
        ScanCheckConfig {
            trials: 100,
            max_len: 512,
            max_state: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanTrial {
    pub seed: u64,
    pub len: usize,
    pub state: usize,
    /// Max |parallel - sequential| over the raw recurrence and the full
    /// selective scan.
    pub scan_deviation: f64,
    /// Max |selective scan - oracle|, when the length allows an oracle run.
    pub oracle_deviation: Option<f64>,
}

impl ScanTrial {
    pub fn passed(&self) -> bool {
        self.scan_deviation <= SCAN_TOLERANCE
            && self.oracle_deviation.is_none_or(|d| d <= ORACLE_TOLERANCE)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanCheckReport {
    pub trials: Vec<ScanTrial>,
    pub max_scan_deviation: f64,
    pub max_oracle_deviation: f64,
    pub oracle_trials: usize,
}

impl ScanCheckReport {
    pub fn passed(&self) -> bool {
        self.trials.iter().all(ScanTrial::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ScanTrial> {
        self.trials.iter().filter(|t| !t.passed())
    }
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// One trial, fully determined by `(seed, len, state)`.
pub fn run_trial(seed: u64, len: usize, state: usize) -> Result<ScanTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = len * state;
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let u: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let s = scan_sequential(&a, &u, state, None)?;
    let p = scan_parallel(&a, &u, state, None)?;
    let mut scan_deviation = max_dev(&s, &p);

    let e = rng.random_range(1..=3);
    let params = SsmParams::init(e, state, &mut rng)?;
    let x = Tensor::randn([len, e], 1.0, &mut rng);
    let ys = selective_scan(&x, &params, ScanMode::Sequential)?;
    let yp = selective_scan(&x, &params, ScanMode::Parallel)?;
    scan_deviation = scan_deviation.max(max_dev(ys.data(), yp.data()));

    let oracle_deviation = if len <= ORACLE_MAX_LEN.min(MAX_ORACLE_LEN) {
        let yo = unrolled_oracle(&x, &params)?;
        Some(max_dev(ys.data(), yo.data()))
    } else {
        None
    };
    Ok(ScanTrial {
        seed,
        len,
        state,
        scan_deviation,
        oracle_deviation,
    })
}

/// Trials 0 and 1 use `L = 1`; later even trials draw `L` from the oracle
/// range, odd ones uniformly from `1..=max_len`.
pub fn scan_check(cfg: &ScanCheckConfig) -> Result<ScanCheckReport> {
    if cfg.max_len == 0 || cfg.max_state == 0 {
        return Err(Error::invalid(
            "max length and max state size must be positive",
        ));
    }
    let mut picker = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trials = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let seed = picker.random::<u64>();
        let len = match t {
            0 | 1 => 1,
            _ if t % 2 == 0 => picker.random_range(1..=cfg.max_len.min(ORACLE_MAX_LEN)),
            _ => picker.random_range(1..=cfg.max_len),
        };
        let state = picker.random_range(1..=cfg.max_state);
        trials.push(run_trial(seed, len, state)?);
    }
    let max_scan_deviation = trials.iter().map(|t| t.scan_deviation).fold(0.0, f64::max);
    let oracle: Vec<f64> = trials.iter().filter_map(|t| t.oracle_deviation).collect();
    Ok(ScanCheckReport {
        max_scan_deviation,
        max_oracle_deviation: oracle.iter().copied().fold(0.0, f64::max),
        oracle_trials: oracle.len(),
        trials,
    })
}
