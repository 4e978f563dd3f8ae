//! Closed-form evaluation of the selective recurrence, kept free of any
//! scan or projection helper so it can serve as an independent reference:
//!
//! `y_t = sum_{s<=t} C_t · (prod_{s<r<=t} A_bar_r) ⊙ B_bar_s x_s + D x_t`
//!
//! Cost is `O(L^2 E N)`; intended for short sequences.

use super::SsmParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_ORACLE_LEN: usize = 256;

pub fn unrolled_oracle(x: &Tensor, params: &SsmParams) -> Result<Tensor> {
    let e = params.model_dim();
    let n = params.state_dim();
    if x.rank() != 2 || x.shape()[1] != e {
        return Err(Error::shape("unrolled_oracle", x.shape(), &[0, e]));
    }
    let len = x.shape()[0];
    if len > MAX_ORACLE_LEN {
        return Err(Error::invalid(format!(
            "oracle is limited to {MAX_ORACLE_LEN} steps, got {len}"
        )));
    }
    let xv = |t: usize, ch: usize| x.data()[t * e + ch];
    let wd = params.w_delta().data();
    let bd = params.b_delta().data();
    let wb = params.w_b().data();
    let wc = params.w_c().data();

    // step[t][ch], bmat[t][s], cmat[t][s] evaluated straight from the weights
    let mut step = vec![vec![0.0; e]; len];
    let mut bmat = vec![vec![0.0; n]; len];
    let mut cmat = vec![vec![0.0; n]; len];
    for t in 0..len {
        for j in 0..e {
            let mut z = bd[j];
            for i in 0..e {
                z += xv(t, i) * wd[i * e + j];
            }
            step[t][j] = if z > 30.0 { z } else { (1.0 + z.exp()).ln() };
        }
        for s in 0..n {
            let (mut b, mut c) = (0.0, 0.0);
            for i in 0..e {
                b += xv(t, i) * wb[i * n + s];
                c += xv(t, i) * wc[i * n + s];
            }
            bmat[t][s] = b;
            cmat[t][s] = c;
        }
    }

    let a = params.a();
    let mut y = vec![0.0; len * e];
    for t in 0..len {
        for ch in 0..e {
            let mut acc = params.d().data()[ch] * xv(t, ch);
            for s in 0..n {
                // walk s' from t down to 0, growing the decay product
                let mut decay = 1.0;
                for src in (0..=t).rev() {
                    acc += cmat[t][s] * decay * step[src][ch] * bmat[src][s] * xv(src, ch);
                    decay *= (step[src][ch] * a[s]).exp();
                }
            }
            y[t * e + ch] = acc;
        }
    }
    Tensor::new([len, e], y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{selective_scan, ScanMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn oracle_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let e = rng.random_range(1..5);
            let n = rng.random_range(1..6);
            let len = rng.random_range(1..40);
            let p = SsmParams::init(e, n, &mut rng).unwrap();
            let x = Tensor::randn([len, e], 1.0, &mut rng);
            let want = unrolled_oracle(&x, &p).unwrap();
            let got = selective_scan(&x, &p, ScanMode::Sequential).unwrap();
            assert!(want.max_abs_diff(&got) <= 1e-8);
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = SsmParams::init(3, 2, &mut rng).unwrap();
        let y = unrolled_oracle(&Tensor::zeros([5, 3]), &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_long_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = SsmParams::init(1, 1, &mut rng).unwrap();
        assert!(unrolled_oracle(&Tensor::zeros([MAX_ORACLE_LEN + 1, 1]), &p).is_err());
    }
}
