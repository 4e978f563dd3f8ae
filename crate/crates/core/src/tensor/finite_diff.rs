use super::Tensor;

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
pub fn finite_diff<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps exactly-zero gradients from turning rounding noise into a
/// large relative error.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / analytic.norm().max(numeric.norm()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 5.0]).unwrap();
        let g = finite_diff(|t| t.sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn half_squared_norm_has_identity_gradient() {
        let x = Tensor::from_vec(vec![0.5, -2.0, 3.25, 0.0]).unwrap();
        let g = finite_diff(
            |t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(),
            &x,
            1e-5,
        );
        assert!(g.max_abs_diff(&x) <= 1e-8);
    }

    #[test]
    fn relative_error_of_identical_is_zero() {
        let x = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        assert_eq!(relative_error(&x, &x, 1e-12), 0.0);
        let z = Tensor::zeros([2]);
        assert_eq!(relative_error(&z, &z, 1e-12), 0.0);
    }
}
