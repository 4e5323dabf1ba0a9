use std::collections::HashSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Phase, View};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Training,
    Validation,
    Challenge,
}

/// One path per (view, phase).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewPhasePaths {
    pub sa_ed: PathBuf,
    pub sa_es: PathBuf,
    pub la_ed: PathBuf,
    pub la_es: PathBuf,
}

impl ViewPhasePaths {
    pub fn get(&self, view: View, phase: Phase) -> &Path {
        match (view, phase) {
            (View::Sa, Phase::Ed) => &self.sa_ed,
            (View::Sa, Phase::Es) => &self.sa_es,
            (View::La, Phase::Ed) => &self.la_ed,
            (View::La, Phase::Es) => &self.la_es,
        }
    }

    fn map(&self, f: impl Fn(&Path) -> PathBuf) -> Self {
        Self {
            sa_ed: f(&self.sa_ed),
            sa_es: f(&self.sa_es),
            la_ed: f(&self.la_ed),
            la_es: f(&self.la_es),
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudyEntry {
    pub subject_id: String,
    pub vendor: String,
    pub pathology: String,
    pub cohort: Cohort,
    pub images: ViewPhasePaths,
    /// Ground-truth label maps; all four or none.
    pub labels: Option<ViewPhasePaths>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    subject_id: String,
    vendor: String,
    pathology: String,
    cohort: Cohort,
    sa_ed: String,
    sa_es: String,
    la_ed: String,
    la_es: String,
    sa_ed_gt: Option<String>,
    sa_es_gt: Option<String>,
    la_ed_gt: Option<String>,
    la_es_gt: Option<String>,
}

fn nonempty(s: Option<String>) -> Option<String> {
    s.filter(|v| !v.trim().is_empty())
}

impl Row {
    fn into_entry(self, base: &Path) -> Result<StudyEntry> {
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        for (name, v) in [("sa_ed", &self.sa_ed), ("sa_es", &self.sa_es), ("la_ed", &self.la_ed), ("la_es", &self.la_es)] {
            if v.trim().is_empty() {
                return Err(Error::validation(format!("subject {}: empty image path {name}", self.subject_id)));
            }
        }
        let gts = [
            nonempty(self.sa_ed_gt),
            nonempty(self.sa_es_gt),
            nonempty(self.la_ed_gt),
            nonempty(self.la_es_gt),
        ];
        let present = gts.iter().filter(|g| g.is_some()).count();
        let labels = match present {
            0 => None,
            4 => {
                let [a, b, c, d] = gts.map(Option::unwrap);
                Some(ViewPhasePaths {
                    sa_ed: resolve(&a),
                    sa_es: resolve(&b),
                    la_ed: resolve(&c),
                    la_es: resolve(&d),
                })
            }
            _ => {
                return Err(Error::validation(format!(
                    "subject {}: label paths must be all present or all absent",
                    self.subject_id
                )))
            }
        };
        Ok(StudyEntry {
            images: ViewPhasePaths {
                sa_ed: resolve(&self.sa_ed),
                sa_es: resolve(&self.sa_es),
                la_ed: resolve(&self.la_ed),
                la_es: resolve(&self.la_es),
            },
            subject_id: self.subject_id,
            vendor: self.vendor,
            pathology: self.pathology,
            cohort: self.cohort,
            labels,
        })
    }
}

/// Reads a manifest CSV. Relative paths are resolved against the manifest's
/// directory; row order is preserved.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<StudyEntry>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let entry = row?.into_entry(&base)?;
        if !seen.insert(entry.subject_id.clone()) {
            return Err(Error::validation(format!("duplicate subject_id {}", entry.subject_id)));
        }
        out.push(entry);
    }
    Ok(out)
}

/// Writes a manifest. Paths inside `base` are stored relative to it.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[StudyEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| -> String {
        p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
    };
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        let images = e.images.map(|p| PathBuf::from(rel(p)));
        let labels = e.labels.as_ref().map(|l| l.map(|p| PathBuf::from(rel(p))));
        let s = |p: &Path| p.to_string_lossy().into_owned();
        w.serialize(Row {
            subject_id: e.subject_id.clone(),
            vendor: e.vendor.clone(),
            pathology: e.pathology.clone(),
            cohort: e.cohort,
            sa_ed: s(&images.sa_ed),
            sa_es: s(&images.sa_es),
            la_ed: s(&images.la_ed),
            la_es: s(&images.la_es),
            sa_ed_gt: labels.as_ref().map(|l| s(&l.sa_ed)),
            sa_es_gt: labels.as_ref().map(|l| s(&l.sa_es)),
            la_ed_gt: labels.as_ref().map(|l| s(&l.la_ed)),
            la_es_gt: labels.as_ref().map(|l| s(&l.la_es)),
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "subject_id,vendor,pathology,cohort,sa_ed,sa_es,la_ed,la_es,sa_ed_gt,sa_es_gt,la_ed_gt,la_es_gt\n";

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("m.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn header_only_is_empty() {
        let d = tempfile::tempdir().unwrap();
        assert!(load_manifest(write(d.path(), HEADER)).unwrap().is_empty());
    }

    #[test]
    fn rows_keep_file_order_and_resolve_paths() {
        let d = tempfile::tempdir().unwrap();
        let body = format!(
            "{HEADER}b,Siemens,NOR,training,b/sa_ed.nii.gz,b/sa_es.nii.gz,b/la_ed.nii.gz,b/la_es.nii.gz,,,,\n\
             a,GE,DLV,validation,/abs/sa_ed.nii,s2,l1,l2,g1,g2,g3,g4\n"
        );
        let m = load_manifest(write(d.path(), &body)).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].subject_id, "b");
        assert_eq!(m[1].subject_id, "a");
        assert!(m[0].labels.is_none());
        assert_eq!(m[0].images.sa_ed, d.path().join("b/sa_ed.nii.gz"));
        assert_eq!(m[1].images.sa_ed, PathBuf::from("/abs/sa_ed.nii"));
        assert_eq!(m[1].labels.as_ref().unwrap().la_es, d.path().join("g4"));
        assert_eq!(m[1].cohort, Cohort::Validation);
    }

    #[test]
    fn missing_column_is_a_format_error() {
        let d = tempfile::tempdir().unwrap();
        let body = "subject_id,vendor,cohort,sa_ed,sa_es,la_ed,la_es\nx,v,training,a,b,c,d\n";
        assert!(matches!(load_manifest(write(d.path(), body)), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_subject_is_a_validation_error() {
        let d = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}x,v,p,training,a,b,c,d,,,,\nx,v,p,training,a,b,c,d,,,,\n");
        assert!(matches!(load_manifest(write(d.path(), &body)), Err(Error::Validation(_))));
    }

    #[test]
    fn partial_labels_are_rejected() {
        let d = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}x,v,p,training,a,b,c,d,g1,,,\n");
        assert!(matches!(load_manifest(write(d.path(), &body)), Err(Error::Validation(_))));
    }

    #[test]
    fn write_then_load_is_identity() {
        let d = tempfile::tempdir().unwrap();
        let base = d.path();
        let entries = vec![StudyEntry {
            subject_id: "s1".into(),
            vendor: "Philips".into(),
            pathology: "HCM".into(),
            cohort: Cohort::Challenge,
            images: ViewPhasePaths {
                sa_ed: base.join("s1/a.nii.gz"),
                sa_es: base.join("s1/b.nii.gz"),
                la_ed: base.join("s1/c.nii.gz"),
                la_es: base.join("s1/d.nii.gz"),
            },
            labels: Some(ViewPhasePaths {
                sa_ed: base.join("s1/e.nii.gz"),
                sa_es: base.join("s1/f.nii.gz"),
                la_ed: base.join("s1/g.nii.gz"),
                la_es: base.join("s1/h.nii.gz"),
            }),
        }];
        let p = base.join("manifest.csv");
        write_manifest(&p, &entries).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("s1/a.nii.gz"));
        assert_eq!(load_manifest(&p).unwrap(), entries);
    }
}
