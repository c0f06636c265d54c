//! Synthetic multi-cohort DCE-MRI-like patient generation and the
//! preprocessing pipeline that would equally serve real volumes: phase
//! selection, geometry standardization (reorientation, unilateral split,
//! spacing resample, center crop), intensity normalization with a
//! flat-field stand-in for bias correction, and clinical encoding.

mod clinical;
mod generate;
mod io;
mod morph;
mod preprocess;

pub use clinical::{
    clinical_term, encode_clinical, ClinicalRaw, ClinicalSchema, ClinicalVector, TrainStats,
};
pub use generate::{generate_cohort, mix_seed, CohortSpec, ShiftSpec};
pub use io::{
    read_manifest, read_mask, read_patient, read_volume, write_manifest, write_mask, write_volume,
    ManifestRow,
};
pub use morph::{bounding_box, connected_components, dilate, mask_centroid};
pub use preprocess::{
    normalize_intensity, preprocess_record, select_phases, standardize_geometry, PreprocessConfig,
};

use serde::{Deserialize, Serialize};

use crate::numcore::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Axial,
    Sagittal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Laterality {
    Unilateral,
    Bilateral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Expert,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CohortTag {
    A,
    B,
    C,
    D,
}

impl std::fmt::Display for CohortTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CohortTag::A => write!(f, "A"),
            CohortTag::B => write!(f, "B"),
            CohortTag::C => write!(f, "C"),
            CohortTag::D => write!(f, "D"),
        }
    }
}

impl std::str::FromStr for CohortTag {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" => Ok(CohortTag::A),
            "B" => Ok(CohortTag::B),
            "C" => Ok(CohortTag::C),
            "D" => Ok(CohortTag::D),
            other => Err(crate::Error::Data(format!("unknown cohort tag {:?}", other))),
        }
    }
}

/// Multi-phase image grid `[C, D, H, W]` with acquisition metadata. The
/// pre-contrast baseline travels alongside until intensity normalization
/// consumes it.
#[derive(Clone)]
pub struct Volume {
    pub data: Grid,
    pub baseline: Option<Grid>,
    /// mm per voxel along (D, H, W).
    pub spacing: [f64; 3],
    pub orientation: Orientation,
    pub laterality: Laterality,
}

impl Volume {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }
}

/// Binary tumor mask `[1, D, H, W]`, spatially aligned with its volume.
#[derive(Clone)]
pub struct Mask {
    pub data: Grid,
    pub provenance: Provenance,
}

impl Mask {
    pub fn extents(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    pub fn voxel_count(&self) -> usize {
        self.data.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// One synthetic patient: image, mask, raw clinical fields, outcome label,
/// and the cohort it belongs to.
#[derive(Clone)]
pub struct PatientRecord {
    pub id: String,
    pub cohort: CohortTag,
    pub volume: Volume,
    pub mask: Mask,
    pub clinical: ClinicalRaw,
    /// 1 = responder.
    pub label: u8,
}
