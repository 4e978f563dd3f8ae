#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmamba3d::diagnostics::bench::{attention_weights, fitted_slope, loglog_slope};
use vmamba3d::diagnostics::scancheck::run_trial;
use vmamba3d::diagnostics::{
    reference_attention, run_bench, scan_check, BenchConfig, BenchRecord, Mechanism,
    ScanCheckConfig,
};
use vmamba3d::tensor::Tensor;

fn weights(e: usize, rng: &mut ChaCha8Rng) -> [Tensor; 3] {
    std::array::from_fn(|_| Tensor::randn([e, e], 0.5, rng))
}

fn matvec(row: &[f64], w: &Tensor) -> Vec<f64> {
    let e = row.len();
    (0..e)
        .map(|j| (0..e).map(|i| row[i] * w.data()[i * e + j]).sum())
        .collect()
}

#[test]
fn single_token_returns_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn([1, 5], 1.0, &mut rng);
    let [wq, wk, wv] = weights(5, &mut rng);
    let y = reference_attention(&x, &wq, &wk, &wv).unwrap();
    let v = matvec(x.data(), &wv);
    for (a, b) in y.data().iter().zip(&v) {
        assert!((a - b).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rows_are_stochastic(len in 1usize..40, e in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::randn([len, e], 2.0, &mut rng);
        let k = Tensor::randn([len, e], 2.0, &mut rng);
        let w = attention_weights(q.data(), k.data(), len, e);
        for row in w.chunks(len) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn matches_pairwise_oracle(len in 1usize..24, e in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn([len, e], 1.0, &mut rng);
        let [wq, wk, wv] = weights(e, &mut rng);
        let y = reference_attention(&x, &wq, &wk, &wv).unwrap();
        let rows: Vec<&[f64]> = x.data().chunks(e).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| matvec(r, &wq)).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| matvec(r, &wk)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| matvec(r, &wv)).collect();
        for i in 0..len {
            let scores: Vec<f64> = (0..len)
                .map(|j| {
                    let dot: f64 = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum();
                    (dot / (e as f64).sqrt()).exp()
                })
                .collect();
            let z: f64 = scores.iter().sum();
            for c in 0..e {
                let want: f64 = (0..len).map(|j| scores[j] / z * v[j][c]).sum();
                prop_assert!((y.data()[i * e + c] - want).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn attention_rejects_bad_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn([3, 4], 1.0, &mut rng);
    let [wq, wk, _] = weights(4, &mut rng);
    let wv = Tensor::zeros([4, 3]);
    assert!(reference_attention(&x, &wq, &wk, &wv).is_err());
}

#[test]
fn scan_check_includes_unit_length_and_reports_triples() {
    let r = scan_check(&ScanCheckConfig {
        trials: 12,
        max_len: 200,
        max_state: 6,
        seed: 5,
    })
    .unwrap();
    assert!(r.passed());
    assert_eq!(r.trials.len(), 12);
    assert_eq!(r.trials[0].len, 1);
    assert_eq!(r.trials[1].len, 1);
    assert!(r.oracle_trials >= 6);
    let again = run_trial(r.trials[7].seed, r.trials[7].len, r.trials[7].state).unwrap();
    assert_eq!(again.scan_deviation, r.trials[7].scan_deviation);
}

#[test]
fn bench_schema_and_slope_fit() {
    let cfg = BenchConfig {
        lengths: vec![16, 32, 64],
        repetitions: 5,
        min_rep_seconds: 0.001,
        ..BenchConfig::default()
    };
    let records = run_bench(&cfg).unwrap();
    assert_eq!(records.len(), 3 * 3);
    assert!(records.iter().all(|r| r.median_seconds > 0.0 && r.len > 0));
    assert!(run_bench(&BenchConfig {
        repetitions: 4,
        ..cfg
    })
    .is_err());

    let xs = [256.0, 512.0, 1024.0, 2048.0];
    let quad: Vec<f64> = xs.iter().map(|x| 3e-9 * x * x).collect();
    assert!((loglog_slope(&xs, &quad).unwrap() - 2.0).abs() < 1e-12);
    // upper half only: the 256 outlier is ignored
    let records: Vec<BenchRecord> = [(256, 9.0), (512, 1.0), (1024, 2.0), (2048, 4.0)]
        .into_iter()
        .map(|(len, t)| BenchRecord {
            mechanism: Mechanism::ScanSequential,
            len,
            median_seconds: t,
            model_dim: 1,
        })
        .collect();
    assert!((fitted_slope(&records, Mechanism::ScanSequential).unwrap() - 1.0).abs() < 1e-12);
}
