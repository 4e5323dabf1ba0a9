//! Fixed-geometry, intensity-normalized, label-remapped SA/LA training
//! representation, and the inverse mapping of predictions back to the
//! acquisition grid.
//!
//! Per view the order is fixed: in-plane resampling (linear for images,
//! nearest for labels), center crop or zero pad to a square matrix, then
//! z-scoring of images over the whole volume. The long-axis slice is
//! replicated to the short-axis slice count after the geometric steps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{
    load_image, load_labels, save_volume, CardiacStudy, Grid, LabelMap, Phase, PhaseImages, View, VolumeGrid,
    CHALLENGE_LABELS,
};
use crate::error::{Error, Result};

/// In-plane target resolution in mm.
pub const TARGET_SPACING: f64 = 1.25;
/// In-plane matrix size after crop/pad.
pub const TARGET_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_spacing: f64,
    pub target_size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spacing: TARGET_SPACING,
            target_size: TARGET_SIZE,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_spacing > 0.0) || !self.target_spacing.is_finite() {
            return Err(Error::validation(format!("target spacing must be > 0, got {}", self.target_spacing)));
        }
        if self.target_size == 0 {
            return Err(Error::validation("target size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Voxel types that can be resampled.
pub trait Resample: Copy + Default {
    const LINEAR_OK: bool;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Resample for f32 {
    const LINEAR_OK: bool = true;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Resample for u8 {
    const LINEAR_OK: bool = false;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as u8
    }
}

/// How the in-plane geometry of one view was changed, enough to map a
/// prediction back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryRecord {
    /// `(rows, cols)` before any processing.
    pub original_shape: [usize; 2],
    /// `(row, col)` spacing before any processing, mm.
    pub original_spacing: [f64; 2],
    /// `(rows, cols)` after resampling, before crop/pad.
    pub resampled_shape: [usize; 2],
    /// Voxels removed `(low, high)` per in-plane axis.
    pub crop: [[usize; 2]; 2],
    /// Zero voxels added `(low, high)` per in-plane axis.
    pub pad: [[usize; 2]; 2],
    pub target_spacing: [f64; 2],
}

impl GeometryRecord {
    /// In-plane shape produced by the recorded forward transform.
    pub fn output_shape(&self) -> [usize; 2] {
        let mut out = [0; 2];
        for a in 0..2 {
            out[a] = self.resampled_shape[a] - self.crop[a][0] - self.crop[a][1] + self.pad[a][0] + self.pad[a][1];
        }
        out
    }

    fn identity(shape: [usize; 2], spacing: [f64; 2]) -> Self {
        Self {
            original_shape: shape,
            original_spacing: spacing,
            resampled_shape: shape,
            crop: [[0; 2]; 2],
            pad: [[0; 2]; 2],
            target_spacing: spacing,
        }
    }
}

fn resampled_len(n: usize, spacing: f64, target: f64) -> usize {
    ((n as f64 * spacing / target).round() as usize).max(1)
}

/// Sampling positions of a half-pixel-aligned resize along one axis, in
/// input voxel coordinates.
fn sample_positions(n_out: usize, out_spacing: f64, in_spacing: f64) -> impl Iterator<Item = f64> {
    let ratio = out_spacing / in_spacing;
    (0..n_out).map(move |o| (o as f64 + 0.5) * ratio - 0.5)
}

fn nearest_index(pos: f64, n: usize) -> usize {
    ((pos + 0.5).floor().max(0.0) as usize).min(n - 1)
}

fn resample_to<T: Resample>(grid: &Grid<T>, out_shape: [usize; 2], out_spacing: [f64; 2], mode: Interpolation) -> Result<Grid<T>> {
    if mode == Interpolation::Linear && !T::LINEAR_OK {
        return Err(Error::validation("label maps must be resampled with nearest-neighbour interpolation"));
    }
    let [ns, nr, nc] = grid.shape();
    let [ss, sr, sc] = grid.spacing();
    let rows: Vec<f64> = sample_positions(out_shape[0], out_spacing[0], sr).collect();
    let cols: Vec<f64> = sample_positions(out_shape[1], out_spacing[1], sc).collect();
    let mut data = Vec::with_capacity(ns * out_shape[0] * out_shape[1]);
    match mode {
        Interpolation::Nearest => {
            let ri: Vec<usize> = rows.iter().map(|&p| nearest_index(p, nr)).collect();
            let ci: Vec<usize> = cols.iter().map(|&p| nearest_index(p, nc)).collect();
            for s in 0..ns {
                let sl = grid.slice(s);
                for &r in &ri {
                    for &c in &ci {
                        data.push(sl[r * nc + c]);
                    }
                }
            }
        }
        Interpolation::Linear => {
            let taps = |p: f64, n: usize| {
                let p = p.clamp(0.0, (n - 1) as f64);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, p - i0 as f64)
            };
            let rt: Vec<_> = rows.iter().map(|&p| taps(p, nr)).collect();
            let ct: Vec<_> = cols.iter().map(|&p| taps(p, nc)).collect();
            for s in 0..ns {
                let sl = grid.slice(s);
                for &(r0, r1, fr) in &rt {
                    for &(c0, c1, fc) in &ct {
                        let v = |r: usize, c: usize| sl[r * nc + c].to_f64();
                        let top = v(r0, c0) + (v(r0, c1) - v(r0, c0)) * fc;
                        let bot = v(r1, c0) + (v(r1, c1) - v(r1, c0)) * fc;
                        data.push(T::from_f64(top + (bot - top) * fr));
                    }
                }
            }
        }
    }
    let origin = grid.origin();
    let shift = |axis: usize, out_sp: f64, in_sp: f64| origin[axis] + (0.5 * out_sp / in_sp - 0.5) * in_sp;
    Grid::with_origin(
        [ns, out_shape[0], out_shape[1]],
        [ss, out_spacing[0], out_spacing[1]],
        [origin[0], shift(1, out_spacing[0], sr), shift(2, out_spacing[1], sc)],
        data,
    )
}

/// Resamples the two in-plane axes to `target_spacing` (mm); the slice axis
/// is untouched. Output size is `round(n · spacing / target)` per axis.
pub fn resample_inplane<T: Resample>(grid: &Grid<T>, target_spacing: [f64; 2], mode: Interpolation) -> Result<Grid<T>> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::validation(format!("target spacing must be positive, got {target_spacing:?}")));
    }
    let [_, sr, sc] = grid.spacing();
    if [sr, sc] == target_spacing {
        if mode == Interpolation::Linear && !T::LINEAR_OK {
            return Err(Error::validation("label maps must be resampled with nearest-neighbour interpolation"));
        }
        return Ok(grid.clone());
    }
    let shape = [
        resampled_len(grid.rows(), sr, target_spacing[0]),
        resampled_len(grid.cols(), sc, target_spacing[1]),
    ];
    resample_to(grid, shape, target_spacing, mode)
}

fn crop_pad_amounts(n: usize, target: usize) -> ([usize; 2], [usize; 2]) {
    if n >= target {
        let excess = n - target;
        ([excess / 2, excess - excess / 2], [0, 0])
    } else {
        let deficit = target - n;
        ([0, 0], [deficit / 2, deficit - deficit / 2])
    }
}

/// Center-crops or zero-pads both in-plane axes to `target` voxels. An odd
/// remainder goes to the high side.
pub fn crop_or_pad<T: Copy + Default>(grid: &Grid<T>, target: usize) -> Result<(Grid<T>, GeometryRecord)> {
    if target == 0 {
        return Err(Error::validation("crop target must be positive"));
    }
    let [ns, nr, nc] = grid.shape();
    let [_, sr, sc] = grid.spacing();
    let mut rec = GeometryRecord::identity([nr, nc], [sr, sc]);
    let (crop_r, pad_r) = crop_pad_amounts(nr, target);
    let (crop_c, pad_c) = crop_pad_amounts(nc, target);
    rec.crop = [crop_r, crop_c];
    rec.pad = [pad_r, pad_c];
    if nr == target && nc == target {
        return Ok((grid.clone(), rec));
    }
    let mut data = vec![T::default(); ns * target * target];
    // copy the overlap of source rows/cols with destination rows/cols
    let rows = nr - crop_r[0] - crop_r[1];
    let cols = nc - crop_c[0] - crop_c[1];
    for s in 0..ns {
        let src = grid.slice(s);
        for r in 0..rows {
            let sr_i = r + crop_r[0];
            let dr = r + pad_r[0];
            let d0 = (s * target + dr) * target + pad_c[0];
            let s0 = sr_i * nc + crop_c[0];
            data[d0..d0 + cols].copy_from_slice(&src[s0..s0 + cols]);
        }
    }
    let o = grid.origin();
    let origin = [
        o[0],
        o[1] + (crop_r[0] as f64 - pad_r[0] as f64) * sr,
        o[2] + (crop_c[0] as f64 - pad_c[0] as f64) * sc,
    ];
    Ok((Grid::with_origin([ns, target, target], grid.spacing(), origin, data)?, rec))
}

/// Standardizes to zero mean and unit variance over the whole volume.
pub fn zscore(grid: &VolumeGrid) -> Result<VolumeGrid> {
    let n = grid.len() as f64;
    let mean = grid.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = grid.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::DegenerateInput(format!("volume has zero variance (value {mean})")));
    }
    Ok(grid.map(|v| ((v as f64 - mean) / std) as f32))
}

/// Stacks `n_slices` copies of a single-slice grid. The slice spacing is set
/// to `slice_spacing` (the matched short-axis spacing).
pub fn replicate_la<T: Copy>(la: &Grid<T>, n_slices: usize, slice_spacing: f64) -> Result<Grid<T>> {
    if la.slices() != 1 {
        return Err(Error::validation(format!("expected a single LA slice, got {}", la.slices())));
    }
    if n_slices < 1 {
        return Err(Error::validation("replication count must be >= 1"));
    }
    let sp = la.spacing();
    let mut data = Vec::with_capacity(la.len() * n_slices);
    for _ in 0..n_slices {
        data.extend_from_slice(la.data());
    }
    Grid::with_origin([n_slices, la.rows(), la.cols()], [slice_spacing, sp[1], sp[2]], la.origin(), data)
}

/// Challenge labels {0 bg, 1 LV pool, 2 LV myo, 3 RV} → internal
/// {0 bg, 1 merged LV, 2 RV}.
pub fn remap_labels(labels: &LabelMap) -> Result<LabelMap> {
    labels.check_labels(&CHALLENGE_LABELS)?;
    Ok(labels.map(|v| match v {
        0 => 0,
        1 | 2 => 1,
        _ => 2,
    }))
}

/// One view of one phase, ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedView {
    /// `N × S × S` z-scored image (the LA slice is replicated to `N`).
    pub image: VolumeGrid,
    /// Internal labels on the same grid.
    pub labels: Option<LabelMap>,
    pub geometry: GeometryRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedPhase {
    pub sa: PreprocessedView,
    pub la: PreprocessedView,
}

impl PreprocessedPhase {
    pub fn view(&self, view: View) -> &PreprocessedView {
        match view {
            View::Sa => &self.sa,
            View::La => &self.la,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedStudy {
    pub subject_id: String,
    pub pathology: String,
    pub ed: PreprocessedPhase,
    pub es: PreprocessedPhase,
}

impl PreprocessedStudy {
    pub fn phase(&self, phase: Phase) -> &PreprocessedPhase {
        match phase {
            Phase::Ed => &self.ed,
            Phase::Es => &self.es,
        }
    }

    /// Short-axis slice count (shared by both phases).
    pub fn slices(&self, phase: Phase) -> usize {
        self.phase(phase).sa.image.slices()
    }

    pub fn has_labels(&self) -> bool {
        Phase::ALL
            .iter()
            .all(|&p| View::ALL.iter().all(|&v| self.phase(p).view(v).labels.is_some()))
    }
}

fn geometry_steps<T: Resample>(grid: &Grid<T>, mode: Interpolation, cfg: &PreprocessConfig) -> Result<(Grid<T>, GeometryRecord)> {
    let sp = grid.spacing();
    let resampled = resample_inplane(grid, [cfg.target_spacing; 2], mode)?;
    let (out, cp) = crop_or_pad(&resampled, cfg.target_size)?;
    let rec = GeometryRecord {
        original_shape: [grid.rows(), grid.cols()],
        original_spacing: [sp[1], sp[2]],
        resampled_shape: [resampled.rows(), resampled.cols()],
        crop: cp.crop,
        pad: cp.pad,
        target_spacing: [cfg.target_spacing; 2],
    };
    Ok((out, rec))
}

fn zscore_or_zero(grid: &VolumeGrid, what: &str) -> VolumeGrid {
    match zscore(grid) {
        Ok(g) => g,
        Err(e) => {
            log::warn!("{what}: {e}; using an all-zero volume");
            grid.map(|_| 0.0)
        }
    }
}

fn preprocess_phase(p: &PhaseImages, label: &str, cfg: &PreprocessConfig) -> Result<PreprocessedPhase> {
    p.validate()?;
    let (sa_geo, sa_rec) = geometry_steps(&p.sa_image, Interpolation::Linear, cfg)?;
    let n = sa_geo.slices();
    let slice_sp = sa_geo.spacing()[0];
    let sa_image = zscore_or_zero(&sa_geo, &format!("{label} SA"));
    let sa_labels = p
        .sa_labels
        .as_ref()
        .map(|l| geometry_steps(l, Interpolation::Nearest, cfg).and_then(|(g, _)| remap_labels(&g)))
        .transpose()?;

    let (la_geo, la_rec) = geometry_steps(&p.la_image, Interpolation::Linear, cfg)?;
    let la_image = zscore_or_zero(&replicate_la(&la_geo, n, slice_sp)?, &format!("{label} LA"));
    let la_labels = p
        .la_labels
        .as_ref()
        .map(|l| {
            let (g, _) = geometry_steps(l, Interpolation::Nearest, cfg)?;
            replicate_la(&remap_labels(&g)?, n, slice_sp)
        })
        .transpose()?;
    Ok(PreprocessedPhase {
        sa: PreprocessedView {
            image: sa_image,
            labels: sa_labels,
            geometry: sa_rec,
        },
        la: PreprocessedView {
            image: la_image,
            labels: la_labels,
            geometry: la_rec,
        },
    })
}

/// Runs the full preprocessing chain on both phases and views.
pub fn preprocess_study(study: &CardiacStudy, cfg: &PreprocessConfig) -> Result<PreprocessedStudy> {
    cfg.validate()?;
    Ok(PreprocessedStudy {
        subject_id: study.subject_id.clone(),
        pathology: study.pathology.clone(),
        ed: preprocess_phase(&study.ed, &format!("{} ED", study.subject_id), cfg)?,
        es: preprocess_phase(&study.es, &format!("{} ES", study.subject_id), cfg)?,
    })
}

/// Maps a label map on the preprocessed grid back to the acquisition grid
/// (nearest neighbour). Regions cropped away in the forward pass come back
/// as background.
pub fn invert_geometry(labels: &LabelMap, rec: &GeometryRecord) -> Result<LabelMap> {
    let out_shape = rec.output_shape();
    if [labels.rows(), labels.cols()] != out_shape {
        return Err(Error::validation(format!(
            "label map in-plane shape {:?} does not match the record's {:?}",
            [labels.rows(), labels.cols()],
            out_shape
        )));
    }
    let [ns, nr, nc] = labels.shape();
    let [rr, rc] = rec.resampled_shape;
    let mut data = vec![0u8; ns * rr * rc];
    let r_off = rec.pad[0][0] as isize - rec.crop[0][0] as isize;
    let c_off = rec.pad[1][0] as isize - rec.crop[1][0] as isize;
    for s in 0..ns {
        let src = labels.slice(s);
        for r in 0..rr {
            let pr = r as isize + r_off;
            if pr < 0 || pr >= nr as isize {
                continue;
            }
            for c in 0..rc {
                let pc = c as isize + c_off;
                if pc < 0 || pc >= nc as isize {
                    continue;
                }
                data[(s * rr + r) * rc + c] = src[pr as usize * nc + pc as usize];
            }
        }
    }
    let sp = labels.spacing();
    let uncropped = Grid::new([ns, rr, rc], [sp[0], rec.target_spacing[0], rec.target_spacing[1]], data)?;
    if rec.original_shape == rec.resampled_shape && rec.original_spacing == rec.target_spacing {
        return Ok(uncropped);
    }
    resample_to(&uncropped, rec.original_shape, rec.original_spacing, Interpolation::Nearest)
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheIndex {
    subject_id: String,
    pathology: String,
    slices: [usize; 2],
    has_labels: bool,
}

fn cache_name(phase: Phase, view: View, what: &str) -> String {
    format!("{}_{}_{}", phase.as_str(), view.as_str(), what)
}

/// Writes a preprocessed study under `dir/<subject_id>/`: one NIfTI per
/// image/label volume and a JSON geometry sidecar per view and phase. The
/// long-axis volumes are stored as their single distinct slice.
pub fn save_preprocessed(study: &PreprocessedStudy, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let sub = dir.as_ref().join(&study.subject_id);
    fs::create_dir_all(&sub)?;
    for phase in Phase::ALL {
        let p = study.phase(phase);
        for view in View::ALL {
            let v = p.view(view);
            let first_only = |g: &VolumeGrid| -> Result<VolumeGrid> {
                let sp = g.spacing();
                Grid::with_origin([1, g.rows(), g.cols()], sp, g.origin(), g.slice(0).to_vec())
            };
            let img = if view == View::La { first_only(&v.image)? } else { v.image.clone() };
            save_volume(&img, sub.join(cache_name(phase, view, "image.nii.gz")))?;
            if let Some(l) = &v.labels {
                let l = if view == View::La {
                    Grid::with_origin([1, l.rows(), l.cols()], l.spacing(), l.origin(), l.slice(0).to_vec())?
                } else {
                    l.clone()
                };
                save_volume(&l, sub.join(cache_name(phase, view, "labels.nii.gz")))?;
            }
            let json = serde_json::to_string_pretty(&v.geometry)?;
            fs::write(sub.join(cache_name(phase, view, "geometry.json")), json)?;
        }
    }
    let idx = CacheIndex {
        subject_id: study.subject_id.clone(),
        pathology: study.pathology.clone(),
        slices: [study.slices(Phase::Ed), study.slices(Phase::Es)],
        has_labels: study.has_labels(),
    };
    fs::write(sub.join("study.json"), serde_json::to_string_pretty(&idx)?)?;
    Ok(sub)
}

/// Reads a study written by [`save_preprocessed`] from its subject directory.
pub fn load_preprocessed(subject_dir: impl AsRef<Path>) -> Result<PreprocessedStudy> {
    let sub = subject_dir.as_ref();
    let idx_path = sub.join("study.json");
    let idx: CacheIndex = serde_json::from_str(&fs::read_to_string(&idx_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(idx_path.clone()),
        _ => Error::Io(e),
    })?)?;
    let load_phase = |phase: Phase| -> Result<PreprocessedPhase> {
        let n = idx.slices[phase.index()];
        let load_view = |view: View| -> Result<PreprocessedView> {
            let mut image = load_image(sub.join(cache_name(phase, view, "image.nii.gz")))?;
            let lpath = sub.join(cache_name(phase, view, "labels.nii.gz"));
            let mut labels = if idx.has_labels { Some(load_labels(lpath)?) } else { None };
            if view == View::La {
                let sp = image.spacing()[0];
                image = replicate_la(&image, n, sp)?;
                labels = labels.map(|l| replicate_la(&l, n, sp)).transpose()?;
            }
            let geometry: GeometryRecord =
                serde_json::from_str(&fs::read_to_string(sub.join(cache_name(phase, view, "geometry.json")))?)?;
            Ok(PreprocessedView { image, labels, geometry })
        };
        Ok(PreprocessedPhase {
            sa: load_view(View::Sa)?,
            la: load_view(View::La)?,
        })
    };
    Ok(PreprocessedStudy {
        subject_id: idx.subject_id.clone(),
        pathology: idx.pathology.clone(),
        ed: load_phase(Phase::Ed)?,
        es: load_phase(Phase::Es)?,
    })
}

/// Loads every subject directory under a cache root, sorted by name.
pub fn load_preprocessed_dir(dir: impl AsRef<Path>) -> Result<Vec<PreprocessedStudy>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let mut subs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("study.json").is_file())
        .collect();
    subs.sort();
    subs.iter().map(load_preprocessed).collect()
}
