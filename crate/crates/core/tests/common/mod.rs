#![allow(dead_code)]

use vmamba3d::arch::ModelConfig;
use vmamba3d::train::{preprocess, Sample};
use vmamba3d::volume::{synth_generate, ClassLabel, SynthSpec};

/// Tiny profile with an 8-wide state.
pub fn tiny8() -> ModelConfig {
    ModelConfig {
        state_dim: 8,
        ..ModelConfig::tiny()
    }
}

/// `per_class` synthetic samples of every class, sample indices from `first`,
/// interleaved AD, MCI, CN.
pub fn synth_samples(first: u64, per_class: u64) -> Vec<Sample> {
    let base = SynthSpec::default();
    let mut out = Vec::new();
    for i in first..first + per_class {
        for label in ClassLabel::ALL {
            let spec = SynthSpec {
                seed: base.sample_seed(label, i),
                ..base.clone()
            };
            let v = synth_generate(label, &spec).unwrap();
            out.push(Sample {
                volume: preprocess(&v, base.dims).unwrap(),
                label,
            });
        }
    }
    out
}
