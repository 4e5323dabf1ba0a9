//! Volume containers, dataset manifests and matched SA/LA study assembly.

mod grid;
mod manifest;
mod nifti;
mod study;

use serde::{Deserialize, Serialize};

pub use grid::{Grid, LabelMap, VolumeGrid, CHALLENGE_LABELS, INTERNAL_LABELS, LV_LABEL, RV_LABEL};
pub use manifest::{load_manifest, write_manifest, Cohort, StudyEntry, ViewPhasePaths};
pub use nifti::{encode as encode_nifti, load_image, load_labels, load_volume, save_volume, LoadedVolume, NiftiVoxel};
pub use study::{assemble_study, CardiacStudy, PhaseImages};

/// Imaging view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Sa,
    La,
}

impl View {
    pub const ALL: [View; 2] = [View::Sa, View::La];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Sa => "sa",
            View::La => "la",
        }
    }
}

/// Cardiac phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ed,
    Es,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::Ed, Phase::Es];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Ed => "ed",
            Phase::Es => "es",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Phase::Ed => 0,
            Phase::Es => 1,
        }
    }
}
