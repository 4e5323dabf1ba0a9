use super::grid::{LabelMap, VolumeGrid};
use super::manifest::StudyEntry;
use super::nifti::{load_image, load_labels};
use super::{Phase, View};
use crate::error::{Error, Result};

/// Images (and optional labels) of one cardiac phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseImages {
    pub sa_image: VolumeGrid,
    /// A single long-axis slice.
    pub la_image: VolumeGrid,
    pub sa_labels: Option<LabelMap>,
    pub la_labels: Option<LabelMap>,
}

impl PhaseImages {
    pub fn image(&self, view: View) -> &VolumeGrid {
        match view {
            View::Sa => &self.sa_image,
            View::La => &self.la_image,
        }
    }

    pub fn labels(&self, view: View) -> Option<&LabelMap> {
        match view {
            View::Sa => self.sa_labels.as_ref(),
            View::La => self.la_labels.as_ref(),
        }
    }

    /// Checks the single-slice LA rule and image/label geometry agreement.
    pub fn validate(&self) -> Result<()> {
        if self.la_image.slices() != 1 {
            return Err(Error::validation(format!(
                "long-axis image must have exactly one slice, got {}",
                self.la_image.slices()
            )));
        }
        for view in View::ALL {
            if let Some(l) = self.labels(view) {
                if !self.image(view).same_geometry(l) {
                    return Err(Error::validation(format!(
                        "{} labels {:?}@{:?} do not match image {:?}@{:?}",
                        view.as_str(),
                        l.shape(),
                        l.spacing(),
                        self.image(view).shape(),
                        self.image(view).spacing()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One subject's matched short-axis volume and long-axis slice for ED and ES.
#[derive(Debug, Clone, PartialEq)]
pub struct CardiacStudy {
    pub subject_id: String,
    pub pathology: String,
    pub ed: PhaseImages,
    pub es: PhaseImages,
}

impl CardiacStudy {
    pub fn phase(&self, phase: Phase) -> &PhaseImages {
        match phase {
            Phase::Ed => &self.ed,
            Phase::Es => &self.es,
        }
    }

    pub fn has_labels(&self) -> bool {
        Phase::ALL
            .iter()
            .all(|&p| View::ALL.iter().all(|&v| self.phase(p).labels(v).is_some()))
    }

    pub fn validate(&self) -> Result<()> {
        self.ed.validate()?;
        self.es.validate()
    }
}

/// Loads every file of a manifest entry and validates the result.
pub fn assemble_study(entry: &StudyEntry) -> Result<CardiacStudy> {
    let load_phase = |phase: Phase| -> Result<PhaseImages> {
        let labels = |view| {
            entry
                .labels
                .as_ref()
                .map(|l| load_labels(l.get(view, phase)))
                .transpose()
        };
        Ok(PhaseImages {
            sa_image: load_image(entry.images.get(View::Sa, phase))?,
            la_image: load_image(entry.images.get(View::La, phase))?,
            sa_labels: labels(View::Sa)?,
            la_labels: labels(View::La)?,
        })
    };
    let study = CardiacStudy {
        subject_id: entry.subject_id.clone(),
        pathology: entry.pathology.clone(),
        ed: load_phase(Phase::Ed)?,
        es: load_phase(Phase::Es)?,
    };
    study.validate()?;
    Ok(study)
}
