//! Synthetic two-view cardiac studies with exact ground truth.
//!
//! Each subject is an analytic label field in millimetres: an ellipsoidal LV
//! blood pool wrapped in a myocardial shell, and an RV crescent (an ellipsoid
//! beside the LV minus the LV epicardium). Short-axis volumes sample the
//! field on axial slices; the long-axis image samples it on the plane that
//! contains the LV long axis and the RV centre. ES shrinks the chambers by
//! the contraction factor.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    save_volume, write_manifest, CardiacStudy, Cohort, Grid, LabelMap, Phase, PhaseImages, StudyEntry, ViewPhasePaths,
    VolumeGrid,
};
use crate::error::{Error, Result};

/// Pathology tags assigned cyclically by [`generate_dataset`].
pub const PATHOLOGIES: [&str; 8] = ["NOR", "LV", "HCM", "ARR", "FALL", "CIA", "RV", "TRI"];
const VENDORS: [&str; 3] = ["Siemens", "GE", "Philips"];

/// Mean intensity per tissue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TissueIntensities {
    pub air: f64,
    pub body: f64,
    pub myocardium: f64,
    pub lv_blood: f64,
    pub rv_blood: f64,
}

impl Default for TissueIntensities {
    fn default() -> Self {
        Self {
            air: 5.0,
            body: 60.0,
            myocardium: 90.0,
            lv_blood: 230.0,
            rv_blood: 170.0,
        }
    }
}

/// Subject-to-subject variation, drawn uniformly from `±` each range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Jitter {
    /// In-plane shift of the heart centre, mm.
    pub shift: f64,
    /// Relative scale of all radii.
    pub scale: f64,
    /// In-plane rotation of the LV→RV direction, degrees.
    pub rotation: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            shift: 8.0,
            scale: 0.1,
            rotation: 20.0,
        }
    }
}

impl Jitter {
    pub fn none() -> Self {
        Self {
            shift: 0.0,
            scale: 0.0,
            rotation: 0.0,
        }
    }
}

/// Axis order everywhere is `(slice/z, row/y, col/x)`; lengths are mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    /// Short-axis volume shape.
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Long-axis image `(rows along z, cols in-plane)`.
    pub la_shape: [usize; 2],
    pub la_spacing: [f64; 2],
    pub la_thickness: f64,
    /// Heart centre relative to the volume centre.
    pub lv_center: [f64; 3],
    /// LV blood pool semi-axes `(long, short)`.
    pub lv_radii: [f64; 2],
    pub myo_thickness: f64,
    /// Distance from the LV axis to the RV ellipsoid centre.
    pub rv_offset: f64,
    /// RV ellipsoid semi-axes `(z, towards the LV, across)`.
    pub rv_radii: [f64; 3],
    /// Chamber scale at `(ED, ES)`.
    pub contraction: [f64; 2],
    /// Body (torso) ellipse semi-axes `(y, x)`.
    pub body_radii: [f64; 2],
    pub intensities: TissueIntensities,
    pub noise_sigma: f64,
    pub jitter: Jitter,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            shape: [10, 288, 288],
            spacing: [10.0, 1.0, 1.0],
            la_shape: [288, 288],
            la_spacing: [1.0, 1.0],
            la_thickness: 8.0,
            lv_center: [0.0; 3],
            lv_radii: [38.0, 22.0],
            myo_thickness: 8.0,
            rv_offset: 28.0,
            rv_radii: [36.0, 22.0, 36.0],
            contraction: [1.0, 0.72],
            body_radii: [110.0, 135.0],
            intensities: TissueIntensities::default(),
            noise_sigma: 10.0,
            jitter: Jitter::default(),
            seed: 0,
        }
    }
}

impl PhantomParams {
    /// Fails on non-positive sizes, bad contraction ordering, or shapes that
    /// may leave the in-plane field of view or the long-axis image.
    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: &[f64]| {
            if v.iter().all(|&x| x > 0.0 && x.is_finite()) {
                Ok(())
            } else {
                Err(Error::validation(format!("phantom {what} must be positive, got {v:?}")))
            }
        };
        positive("spacing", &self.spacing)?;
        positive("long-axis spacing", &self.la_spacing)?;
        positive("long-axis thickness", &[self.la_thickness])?;
        positive("LV radii", &self.lv_radii)?;
        positive("myocardium thickness", &[self.myo_thickness])?;
        positive("RV radii", &self.rv_radii)?;
        positive("body radii", &self.body_radii)?;
        if self.shape.iter().chain(&self.la_shape).any(|&n| n == 0) {
            return Err(Error::validation("phantom grid dimensions must be >= 1"));
        }
        let [ed, es] = self.contraction;
        if !(ed > 0.0 && ed <= 1.0 && es > 0.0 && es < ed) {
            return Err(Error::validation(format!(
                "contraction factors must satisfy 0 < ES < ED <= 1, got {:?}",
                self.contraction
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::validation("noise sigma must be >= 0"));
        }
        let j = &self.jitter;
        if !(j.shift >= 0.0 && (0.0..1.0).contains(&j.scale) && j.rotation >= 0.0) {
            return Err(Error::validation(format!("invalid jitter {j:?}")));
        }

        // worst-case extents around the heart centre
        let s = 1.0 + j.scale;
        let epi = [self.lv_radii[0] * s + self.myo_thickness, self.lv_radii[1] * s + self.myo_thickness];
        let rv_in_plane = (self.rv_offset + self.rv_radii[1] * s).max(self.rv_radii[2] * s);
        let z_half = epi[0].max(self.rv_radii[0] * s) + self.lv_center[0].abs();
        let xy_half = epi[1].max(rv_in_plane) + j.shift + self.lv_center[1].abs().max(self.lv_center[2].abs());
        let half = |n: usize, sp: f64| n as f64 * sp / 2.0;
        // the short-axis stack may truncate the apex and base, as real ones do
        let fits = xy_half <= half(self.shape[1], self.spacing[1]).min(half(self.shape[2], self.spacing[2]))
            && z_half <= half(self.la_shape[0], self.la_spacing[0])
            && xy_half <= half(self.la_shape[1], self.la_spacing[1]);
        if !fits {
            return Err(Error::validation(format!(
                "phantom anatomy (half extents {z_half:.1} mm axial, {xy_half:.1} mm in-plane) exceeds the imaging grid"
            )));
        }
        Ok(())
    }
}

/// One subject's drawn anatomy: evaluates labels anywhere in space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomAnatomy {
    /// Heart centre relative to the volume centre, `(z, y, x)` mm.
    pub center: [f64; 3],
    /// Unit in-plane direction `(y, x)` from the LV axis towards the RV.
    pub direction: [f64; 2],
    pub scale: f64,
    params: PhantomParams,
}

impl PhantomAnatomy {
    pub fn draw(params: &PhantomParams, rng: &mut impl Rng) -> Self {
        let j = &params.jitter;
        let mut uniform = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let dy = uniform(j.shift);
        let dx = uniform(j.shift);
        let scale = 1.0 + uniform(j.scale);
        let angle = uniform(j.rotation) * PI / 180.0;
        let c = params.lv_center;
        Self {
            center: [c[0], c[1] + dy, c[2] + dx],
            direction: [angle.sin(), angle.cos()],
            scale,
            params: params.clone(),
        }
    }

    /// Challenge label at a point relative to the volume centre.
    pub fn label_at(&self, p: [f64; 3], phase: Phase) -> u8 {
        let k = self.params.contraction[phase.index()] * self.scale;
        let z = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dx = p[2] - self.center[2];
        let [uy, ux] = self.direction;
        let a = dy * uy + dx * ux;
        let b = dx * uy - dy * ux;
        let sq = |v: f64, r: f64| (v / r) * (v / r);

        let [long, short] = self.params.lv_radii;
        let pool = sq(z, long * k) + sq(a, short * k) + sq(b, short * k);
        if pool <= 1.0 {
            return 1;
        }
        let t = self.params.myo_thickness;
        let epi = sq(z, long * k + t) + sq(a, short * k + t) + sq(b, short * k + t);
        if epi <= 1.0 {
            return 2;
        }
        let [rz, ra, rb] = self.params.rv_radii;
        let rv = sq(z, rz * k) + sq(a - self.params.rv_offset * self.scale, ra * k) + sq(b, rb * k);
        if rv <= 1.0 {
            return 3;
        }
        0
    }

    fn inside_body(&self, p: [f64; 3]) -> bool {
        let [ry, rx] = self.params.body_radii;
        (p[1] / ry).powi(2) + (p[2] / rx).powi(2) <= 1.0
    }

    fn intensity(&self, label: u8, p: [f64; 3]) -> f64 {
        let t = &self.params.intensities;
        match label {
            1 => t.lv_blood,
            2 => t.myocardium,
            3 => t.rv_blood,
            _ if self.inside_body(p) => t.body,
            _ => t.air,
        }
    }

    /// Physical position of short-axis voxel `(s, r, c)`.
    pub fn sa_point(&self, s: usize, r: usize, c: usize) -> [f64; 3] {
        let p = &self.params;
        let centered = |i: usize, n: usize, sp: f64| (i as f64 - (n as f64 - 1.0) / 2.0) * sp;
        [
            centered(s, p.shape[0], p.spacing[0]),
            centered(r, p.shape[1], p.spacing[1]),
            centered(c, p.shape[2], p.spacing[2]),
        ]
    }

    /// Physical position of long-axis pixel `(r, c)`. Rows run along z from
    /// the volume centre; columns run along the LV→RV direction, centred on
    /// the point of the plane closest to the volume axis.
    pub fn la_point(&self, r: usize, c: usize) -> [f64; 3] {
        let p = &self.params;
        let [uy, ux] = self.direction;
        let z = (r as f64 - (p.la_shape[0] as f64 - 1.0) / 2.0) * p.la_spacing[0];
        let along = self.center[1] * uy + self.center[2] * ux;
        let t = (c as f64 - (p.la_shape[1] as f64 - 1.0) / 2.0) * p.la_spacing[1] - along;
        [z, self.center[1] + t * uy, self.center[2] + t * ux]
    }
}

fn render(
    anatomy: &PhantomAnatomy,
    shape: [usize; 3],
    spacing: [f64; 3],
    point: impl Fn(usize, usize, usize) -> [f64; 3],
    phase: Phase,
    noise: &mut impl FnMut() -> f64,
) -> Result<(VolumeGrid, LabelMap)> {
    let n = shape.iter().product();
    let mut labels = Vec::with_capacity(n);
    let mut image = Vec::with_capacity(n);
    for s in 0..shape[0] {
        for r in 0..shape[1] {
            for c in 0..shape[2] {
                let p = point(s, r, c);
                let l = anatomy.label_at(p, phase);
                labels.push(l);
                image.push((anatomy.intensity(l, p) + noise()) as f32);
            }
        }
    }
    Ok((Grid::new(shape, spacing, image)?, Grid::new(shape, spacing, labels)?))
}

/// Builds one subject (ED and ES, SA and LA, images and challenge labels)
/// from `params.seed`.
pub fn generate_phantom(params: &PhantomParams) -> Result<CardiacStudy> {
    generate_subject(params, format!("phantom_{:03}", 0), PATHOLOGIES[0])
}

fn generate_subject(params: &PhantomParams, subject_id: String, pathology: &str) -> Result<CardiacStudy> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let anatomy = PhantomAnatomy::draw(params, &mut rng);
    let normal = Normal::new(0.0, params.noise_sigma).map_err(|e| Error::validation(e.to_string()))?;
    let mut noise = || if params.noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
    let mut phase = |phase: Phase| -> Result<PhaseImages> {
        let (sa_image, sa_labels) = render(
            &anatomy,
            params.shape,
            params.spacing,
            |s, r, c| anatomy.sa_point(s, r, c),
            phase,
            &mut noise,
        )?;
        let [lr, lc] = params.la_shape;
        let (la_image, la_labels) = render(
            &anatomy,
            [1, lr, lc],
            [params.la_thickness, params.la_spacing[0], params.la_spacing[1]],
            |_, r, c| anatomy.la_point(r, c),
            phase,
            &mut noise,
        )?;
        Ok(PhaseImages {
            sa_image,
            la_image,
            sa_labels: Some(sa_labels),
            la_labels: Some(la_labels),
        })
    };
    let ed = phase(Phase::Ed)?;
    let es = phase(Phase::Es)?;
    Ok(CardiacStudy {
        subject_id,
        pathology: pathology.to_string(),
        ed,
        es,
    })
}

/// Writes `n` subjects under `out_dir` (subject `i` uses seed `seed + i`)
/// and a `manifest.csv` listing them; returns the manifest path.
pub fn generate_dataset(n: usize, seed: u64, out_dir: impl AsRef<Path>, params: &PhantomParams) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::validation("subject count must be >= 1"));
    }
    params.validate()?;
    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("phantom_{i:03}");
        let p = PhantomParams {
            seed: seed.wrapping_add(i as u64),
            ..params.clone()
        };
        let study = generate_subject(&p, id.clone(), PATHOLOGIES[i % PATHOLOGIES.len()])?;
        let dir = out.join(&id);
        fs::create_dir_all(&dir)?;
        let path = |view: &str, phase: Phase, gt: bool| {
            dir.join(format!("{id}_{view}_{}{}.nii.gz", phase.as_str().to_uppercase(), if gt { "_gt" } else { "" }))
        };
        let paths = |gt: bool| ViewPhasePaths {
            sa_ed: path("SA", Phase::Ed, gt),
            sa_es: path("SA", Phase::Es, gt),
            la_ed: path("LA", Phase::Ed, gt),
            la_es: path("LA", Phase::Es, gt),
        };
        let (images, labels) = (paths(false), paths(true));
        for phase in Phase::ALL {
            let ph = study.phase(phase);
            let sa = crate::dataio::View::Sa;
            let la = crate::dataio::View::La;
            save_volume(&ph.sa_image, images.get(sa, phase))?;
            save_volume(&ph.la_image, images.get(la, phase))?;
            save_volume(ph.sa_labels.as_ref().expect("phantoms carry labels"), labels.get(sa, phase))?;
            save_volume(ph.la_labels.as_ref().expect("phantoms carry labels"), labels.get(la, phase))?;
        }
        entries.push(StudyEntry {
            subject_id: id,
            vendor: VENDORS[i % VENDORS.len()].to_string(),
            pathology: study.pathology,
            cohort: Cohort::Training,
            images,
            labels: Some(labels),
        });
    }
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{assemble_study, load_manifest, View};

    fn small() -> PhantomParams {
        PhantomParams {
            shape: [6, 160, 160],
            la_shape: [160, 160],
            spacing: [12.0, 1.0, 1.0],
            ..PhantomParams::default()
        }
    }

    fn dice(a: &[u8], b: &[u8], label: u8) -> f64 {
        let inter = a.iter().zip(b).filter(|(x, y)| **x == label && **y == label).count();
        let na = a.iter().filter(|&&x| x == label).count();
        let nb = b.iter().filter(|&&x| x == label).count();
        2.0 * inter as f64 / (na + nb) as f64
    }

    #[test]
    fn defaults_validate_and_bad_params_do_not() {
        PhantomParams::default().validate().unwrap();
        let mut p = PhantomParams::default();
        p.contraction = [0.8, 0.9];
        assert!(p.validate().is_err());
        let mut p = PhantomParams::default();
        p.lv_radii = [0.0, 10.0];
        assert!(p.validate().is_err());
        let mut p = PhantomParams::default();
        p.shape = [10, 64, 64];
        assert!(matches!(generate_phantom(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn noise_free_mid_slice_matches_circles() {
        // odd slice count puts a slice through the heart centre
        let p = PhantomParams {
            shape: [9, 160, 160],
            noise_sigma: 0.0,
            jitter: Jitter::none(),
            ..small()
        };
        let study = generate_phantom(&p).unwrap();
        let labels = study.ed.sa_labels.as_ref().unwrap();
        let img = &study.ed.sa_image;
        let [_, rows, cols] = labels.shape();
        for r in 0..rows {
            for c in 0..cols {
                let y = r as f64 - 79.5;
                let x = c as f64 - 79.5;
                let d = (x * x + y * y).sqrt();
                let rv = ((x - 28.0) / 22.0).powi(2) + (y / 36.0).powi(2) <= 1.0;
                let expect = if d <= 22.0 {
                    1
                } else if d <= 30.0 {
                    2
                } else if rv {
                    3
                } else {
                    0
                };
                assert_eq!(labels.get(4, r, c), expect, "at ({r}, {c})");
                if expect == 1 {
                    assert_eq!(img.get(4, r, c), 230.0);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_study() {
        let p = small();
        assert_eq!(generate_phantom(&p).unwrap(), generate_phantom(&p).unwrap());
        let q = PhantomParams { seed: 1, ..small() };
        assert_ne!(generate_phantom(&p).unwrap().ed.sa_image, generate_phantom(&q).unwrap().ed.sa_image);
    }

    #[test]
    fn long_axis_matches_reslice_of_fine_field() {
        let p = PhantomParams { seed: 11, ..small() };
        let study = generate_phantom(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let anatomy = PhantomAnatomy::draw(&p, &mut rng);
        // rasterize the field on a 1 mm isotropic grid, then reslice it with
        // nearest-neighbour lookups along the long-axis plane
        let n = 160usize;
        let half = (n as f64 - 1.0) / 2.0;
        let mut fine = vec![0u8; n * n * n];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    fine[(z * n + y) * n + x] =
                        anatomy.label_at([z as f64 - half, y as f64 - half, x as f64 - half], Phase::Ed);
                }
            }
        }
        let la = study.ed.la_labels.as_ref().unwrap();
        let mut resliced = Vec::with_capacity(la.len());
        for r in 0..la.rows() {
            for c in 0..la.cols() {
                let q = anatomy.la_point(r, c);
                let idx = |v: f64| ((v + half).round().clamp(0.0, n as f64 - 1.0)) as usize;
                resliced.push(fine[(idx(q[0]) * n + idx(q[1])) * n + idx(q[2])]);
            }
        }
        for label in 1..=3 {
            let d = dice(la.data(), &resliced, label);
            assert!(d >= 0.99, "label {label}: {d}");
        }
    }

    #[test]
    fn views_are_consistent_and_es_is_smaller() {
        for seed in 0..4 {
            let study = generate_phantom(&PhantomParams { seed, ..small() }).unwrap();
            for phase in Phase::ALL {
                let ph = study.phase(phase);
                for view in View::ALL {
                    ph.labels(view).unwrap().check_labels(&[0, 1, 2, 3]).unwrap();
                }
                assert!(ph.sa_labels.as_ref().unwrap().count(3) > 100);
                assert!(ph.la_labels.as_ref().unwrap().count(3) > 0);
            }
            let rv = |p: Phase| study.phase(p).sa_labels.as_ref().unwrap().count(3);
            assert!(rv(Phase::Es) < rv(Phase::Ed));
            study.ed.validate().unwrap();
        }
    }

    #[test]
    fn dataset_files_and_manifest() {
        let d = tempfile::tempdir().unwrap();
        let m = generate_dataset(1, 3, d.path().join("a"), &small()).unwrap();
        let names: Vec<String> = fs::read_dir(d.path().join("a/phantom_000"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names.len(), 8);
        assert_eq!(names.iter().filter(|n| n.ends_with("_gt.nii.gz")).count(), 4);
        let entries = load_manifest(&m).unwrap();
        assert_eq!(entries.len(), 1);
        let study = assemble_study(&entries[0]).unwrap();
        assert!(study.has_labels());
        let fresh = generate_subject(&PhantomParams { seed: 3, ..small() }, "phantom_000".into(), "NOR").unwrap();
        for phase in Phase::ALL {
            for view in View::ALL {
                let (a, b) = (study.phase(phase), fresh.phase(phase));
                assert!(a.image(view).same_geometry(b.image(view)));
                assert_eq!(a.image(view).data(), b.image(view).data());
                assert_eq!(a.labels(view).unwrap().data(), b.labels(view).unwrap().data());
            }
        }

        let m1 = generate_dataset(3, 5, d.path().join("b"), &small()).unwrap();
        let m2 = generate_dataset(3, 5, d.path().join("c"), &small()).unwrap();
        assert_eq!(fs::read(m1).unwrap(), fs::read(m2).unwrap());
        assert!(generate_dataset(0, 5, d.path().join("e"), &small()).is_err());
    }
}
