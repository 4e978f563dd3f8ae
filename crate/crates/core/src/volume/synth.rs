//! Labelled synthetic volumes with class-ordered anatomy: a bright sphere
//! that shrinks and a dark ellipsoid that grows from CN through MCI to AD,
//! over clamped Gaussian background noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassLabel, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BACKGROUND: f64 = 0.2;
const SPHERE: f64 = 0.8;
const ELLIPSOID: f64 = 0.05;
/// Relative semi-axes of the dark ellipsoid.
const ELLIPSOID_SHAPE: [f64; 3] = [1.0, 0.6, 0.8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Sphere radius in voxels before the class factor.
    pub radius: f64,
    /// Sphere radius factor per class, indexed AD, MCI, CN.
    pub radius_factors: [f64; 3],
    /// Ellipsoid major semi-axis as a fraction of `radius`, indexed AD, MCI, CN.
    pub ellipsoid_scales: [f64; 3],
    /// Constant added to every voxel before clamping (domain-shift knob).
    pub intensity_bias: f64,
    /// Maximum centre offset per axis, in voxels.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::for_dims([32, 32, 16])
    }
}

impl SynthSpec {
    /// Defaults scaled to `dims`.
    pub fn for_dims(dims: [usize; 3]) -> Self {
        let jitter = 1.0;
        let half = *dims.iter().min().unwrap_or(&0) as f64 / 2.0;
        SynthSpec {
            dims,
            noise_sigma: 0.05,
            radius: (0.8 * (half - jitter - 0.5)).max(0.0),
            radius_factors: [0.5, 0.75, 1.0],
            ellipsoid_scales: [0.45, 0.3, 0.15],
            intensity_bias: 0.0,
            jitter,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [ad, mci, cn] = self.radius_factors;
        if !(cn > mci && mci > ad && ad > 0.0) {
            return Err(Error::invalid(format!(
                "radius factors must satisfy CN > MCI > AD > 0, got {:?}",
                self.radius_factors
            )));
        }
        let [ead, emci, ecn] = self.ellipsoid_scales;
        if !(ead > emci && emci > ecn && ecn >= 0.0) {
            return Err(Error::invalid(format!(
                "ellipsoid scales must satisfy AD > MCI > CN >= 0, got {:?}",
                self.ellipsoid_scales
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        if !(self.radius > 0.0 && self.jitter >= 0.0) {
            return Err(Error::invalid(
                "radius must be positive and jitter non-negative",
            ));
        }
        if self.dims.contains(&0) {
            return Err(Error::invalid("synthetic dims must be positive"));
        }
        let reach = self.radius * cn.max(ead) + self.jitter;
        for (axis, &d) in self.dims.iter().enumerate() {
            let centre = (d as f64 - 1.0) / 2.0;
            if reach > centre {
                return Err(Error::invalid(format!(
                    "structures of radius {reach:.2} (jitter included) exceed dims {:?} along axis {axis}",
                    self.dims
                )));
            }
        }
        Ok(())
    }

    /// Deterministic per-sample seed derived from `self.seed`.
    pub fn sample_seed(&self, label: ClassLabel, index: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(((label.index() as u64) << 40) | index)
    }
}

/// One volume of class `label`, fully determined by `(label, spec)`.
pub fn synth_generate(label: ClassLabel, spec: &SynthSpec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centre: [f64; 3] = std::array::from_fn(|a| {
        let off = if spec.jitter > 0.0 {
            rng.random_range(-spec.jitter..=spec.jitter)
        } else {
            0.0
        };
        (spec.dims[a] as f64 - 1.0) / 2.0 + off
    });
    let r = spec.radius * spec.radius_factors[label.index()];
    let e = spec.radius * spec.ellipsoid_scales[label.index()];
    let semi = ELLIPSOID_SHAPE.map(|s| s * e);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|err| Error::invalid(format!("noise distribution: {err}")))?;
    let [nx, ny, nz] = spec.dims;
    let mut data = Vec::with_capacity(nx * ny * nz);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let d = [
                    x as f64 - centre[0],
                    y as f64 - centre[1],
                    z as f64 - centre[2],
                ];
                let in_sphere = d.iter().map(|v| v * v).sum::<f64>() <= r * r;
                let in_ellipsoid = e > 0.0
                    && d.iter()
                        .zip(&semi)
                        .map(|(v, s)| (v / s).powi(2))
                        .sum::<f64>()
                        <= 1.0;
                let base = if in_ellipsoid {
                    ELLIPSOID
                } else if in_sphere {
                    SPHERE
                } else {
                    BACKGROUND
                };
                let v = (base + spec.intensity_bias + noise.sample(&mut rng)).clamp(0.0, 1.0);
                data.push(v as f32 as f64);
            }
        }
    }
    let id = format!("synth-{label}-{}", spec.seed);
    Volume::new(Tensor::new(spec.dims.to_vec(), data)?, [1.0; 3], id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SynthSpec::default();
        let a = synth_generate(ClassLabel::MCI, &spec).unwrap();
        let b = synth_generate(ClassLabel::MCI, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), spec.dims);
    }

    #[test]
    fn structures_must_fit() {
        let spec = SynthSpec {
            radius: 10.0,
            ..SynthSpec::default()
        };
        assert!(synth_generate(ClassLabel::CN, &spec).is_err());
    }

    #[test]
    fn class_factor_ordering_enforced() {
        let spec = SynthSpec {
            radius_factors: [1.0, 0.75, 0.5],
            ..SynthSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn shell_mean_orders_classes() {
        let base = SynthSpec::default();
        let r = base.radius * base.radius_factors[2];
        for s in 0..20u64 {
            let means: Vec<f64> = ClassLabel::ALL
                .iter()
                .map(|&label| {
                    let spec = SynthSpec {
                        seed: base.sample_seed(label, s),
                        jitter: 0.0,
                        ..base.clone()
                    };
                    let v = synth_generate(label, &spec).unwrap();
                    let c = spec.dims.map(|d| (d as f64 - 1.0) / 2.0);
                    let (mut sum, mut n) = (0.0, 0usize);
                    let [_, ny, nz] = spec.dims;
                    for (i, &val) in v.voxels().data().iter().enumerate() {
                        let p = [i / (ny * nz), (i / nz) % ny, i % nz];
                        let d2: f64 = (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum();
                        if d2 <= r * r {
                            sum += val;
                            n += 1;
                        }
                    }
                    sum / n as f64
                })
                .collect();
            assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
        }
    }
}
