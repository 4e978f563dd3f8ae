use super::Volume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Min-max scaling to `[0, 1]`. A constant volume maps to all zeros.
pub fn normalize01(v: &Volume) -> Volume {
    let data = v.voxels().data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let voxels = if range > 0.0 {
        v.voxels().map(|x| ((x - lo) / range).clamp(0.0, 1.0))
    } else {
        Tensor::zeros(v.voxels().shape().to_vec())
    };
    Volume::new(voxels, v.spacing_mm(), v.source_id()).expect("finite by construction")
}

/// Source coordinate of target index `i` under corner alignment.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        (src - 1) as f64 / 2.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Trilinear resampling with corner-aligned grids (first and last samples
/// of each axis coincide). Spacing is rescaled so the physical extent is kept.
pub fn resize_to(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.contains(&0) {
        return Err(Error::invalid(format!(
            "target dims must be positive, got {target:?}"
        )));
    }
    let src = v.dims();
    if src == target {
        return Ok(v.clone());
    }
    // per axis: (lower index, upper index, weight of upper)
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            (0..target[a])
                .map(|i| {
                    let c = source_coord(i, src[a], target[a]);
                    let lo = (c.floor() as usize).min(src[a] - 1);
                    let hi = (lo + 1).min(src[a] - 1);
                    (lo, hi, c - lo as f64)
                })
                .collect()
        })
        .collect();
    let d = v.voxels().data();
    let at = |x: usize, y: usize, z: usize| d[(x * src[1] + y) * src[2] + z];
    let mut out = Vec::with_capacity(target.iter().product());
    for &(x0, x1, wx) in &taps[0] {
        for &(y0, y1, wy) in &taps[1] {
            for &(z0, z1, wz) in &taps[2] {
                let lerp = |a: f64, b: f64, w: f64| a + (b - a) * w;
                let c00 = lerp(at(x0, y0, z0), at(x0, y0, z1), wz);
                let c01 = lerp(at(x0, y1, z0), at(x0, y1, z1), wz);
                let c10 = lerp(at(x1, y0, z0), at(x1, y0, z1), wz);
                let c11 = lerp(at(x1, y1, z0), at(x1, y1, z1), wz);
                out.push(lerp(lerp(c00, c01, wy), lerp(c10, c11, wy), wx));
            }
        }
    }
    let spacing = std::array::from_fn(|a| {
        let s = v.spacing_mm()[a];
        if src[a] > 1 && target[a] > 1 {
            s * (src[a] - 1) as f64 / (target[a] - 1) as f64
        } else {
            s * src[a] as f64 / target[a] as f64
        }
    });
    Volume::new(Tensor::new(target.to_vec(), out)?, spacing, v.source_id())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: [usize; 3], data: Vec<f64>) -> Volume {
        Volume::new(Tensor::new(shape, data).unwrap(), [1.0; 3], "t").unwrap()
    }

    #[test]
    fn normalize_simple() {
        let v = normalize01(&vol([3, 1, 1], vec![2.0, 4.0, 6.0]));
        assert_eq!(v.voxels().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_constant_is_zero() {
        let v = normalize01(&vol([2, 2, 1], vec![5.0; 4]));
        assert!(v.voxels().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_resize() {
        let v = vol([2, 3, 2], (0..12).map(f64::from).collect());
        assert_eq!(resize_to(&v, [2, 3, 2]).unwrap(), v);
    }

    #[test]
    fn constant_upsample_stays_constant() {
        let v = vol([2, 3, 2], vec![0.7; 12]);
        let r = resize_to(&v, [4, 6, 4]).unwrap();
        assert!(r.voxels().data().iter().all(|&x| (x - 0.7).abs() < 1e-15));
    }

    #[test]
    fn ramp_downsample_matches_closed_form() {
        // f(x) = 3x + 1 on 9 samples, resampled to 4: corner-aligned
        // coordinates are 0, 8/3, 16/3, 8
        let v = vol([9, 1, 1], (0..9).map(|x| 3.0 * x as f64 + 1.0).collect());
        let r = resize_to(&v, [4, 1, 1]).unwrap();
        for (i, &got) in r.voxels().data().iter().enumerate() {
            let x = i as f64 * 8.0 / 3.0;
            assert!((got - (3.0 * x + 1.0)).abs() <= 1e-6);
        }
        assert!((r.spacing_mm()[0] - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_target_rejected() {
        assert!(resize_to(&vol([1, 1, 1], vec![1.0]), [0, 1, 1]).is_err());
    }
}
