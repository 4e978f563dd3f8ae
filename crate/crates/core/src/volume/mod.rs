//! Volumes on disk and in memory: NIfTI-1 codec, intensity/size
//! preprocessing, the synthetic generator and dataset manifests.

pub mod dataset;
pub mod nifti;
pub mod preprocess;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dataset::{stratified_split, Entry, Manifest, Split};
pub use nifti::{read_nifti, write_nifti, NiftiHeader};
pub use preprocess::{normalize01, resize_to};
pub use synth::{synth_generate, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    AD,
    MCI,
    CN,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::AD, ClassLabel::MCI, ClassLabel::CN];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("class index {i} out of range")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::AD => "AD",
            ClassLabel::MCI => "MCI",
            ClassLabel::CN => "CN",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AD" => Ok(ClassLabel::AD),
            "MCI" => Ok(ClassLabel::MCI),
            "CN" => Ok(ClassLabel::CN),
            other => Err(Error::invalid(format!(
                "unknown label `{other}` (expected AD, MCI or CN)"
            ))),
        }
    }
}

/// A scalar 3D image. Axis `i` of `voxels` has spacing `spacing_mm[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    voxels: Tensor,
    spacing_mm: [f64; 3],
    source_id: String,
}

impl Volume {
    pub fn new(voxels: Tensor, spacing_mm: [f64; 3], source_id: impl Into<String>) -> Result<Self> {
        if voxels.rank() != 3 {
            return Err(Error::shape("volume", voxels.shape(), &[0, 0, 0]));
        }
        if !voxels.is_finite() {
            return Err(Error::NonFinite("volume voxels".into()));
        }
        if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!(
                "voxel spacing must be positive, got {spacing_mm:?}"
            )));
        }
        Ok(Volume {
            voxels,
            spacing_mm,
            source_id: source_id.into(),
        })
    }

    pub fn voxels(&self) -> &Tensor {
        &self.voxels
    }

    pub fn into_voxels(self) -> Tensor {
        self.voxels
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }
}
