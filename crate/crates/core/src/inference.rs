//! Fold-ensemble prediction: per-model class probabilities, averaging
//! across models, argmax, removal of small clusters and mapping back to the
//! acquisition grid.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::dataio::{assemble_study, save_volume, Grid, LabelMap, Phase, StudyEntry, View};
use crate::error::{Error, Result};
use crate::metrics::prediction_path;
use crate::network::{Mode, NetworkConfig, ParameterSet, Tensor};
use crate::preprocess::{invert_geometry, preprocess_study, PreprocessConfig, PreprocessedStudy};

/// Per-voxel class probabilities on a `slices × rows × cols` grid, stored
/// class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    classes: usize,
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(classes: usize, shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if classes == 0 || n == 0 || data.len() != classes * n {
            return Err(Error::validation(format!(
                "{classes} classes on {shape:?} need {} values, got {}",
                classes * n,
                data.len()
            )));
        }
        Ok(Self { classes, shape, spacing, data })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    /// Probabilities of class `k` for every voxel.
    pub fn class(&self, k: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Largest deviation of a voxel's class sum from one.
    pub fn simplex_error(&self) -> f64 {
        let n = self.voxels();
        (0..n)
            .map(|i| ((0..self.classes).map(|k| self.data[k * n + i] as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean over slices, as a single-slice map.
    fn mean_over_slices(&self) -> ProbabilityMap {
        let [ns, nr, nc] = self.shape;
        let plane = nr * nc;
        let mut data = vec![0.0f32; self.classes * plane];
        for k in 0..self.classes {
            let src = self.class(k);
            let dst = &mut data[k * plane..(k + 1) * plane];
            for i in 0..plane {
                let s: f64 = (0..ns).map(|s| src[s * plane + i] as f64).sum();
                dst[i] = (s / ns as f64) as f32;
            }
        }
        ProbabilityMap {
            classes: self.classes,
            shape: [1, nr, nc],
            spacing: self.spacing,
            data,
        }
    }
}

/// Probabilities of both views of one phase. The LA map has one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseProbabilities {
    pub sa: ProbabilityMap,
    pub la: ProbabilityMap,
}

impl PhaseProbabilities {
    pub fn view(&self, view: View) -> &ProbabilityMap {
        match view {
            View::Sa => &self.sa,
            View::La => &self.la,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyProbabilities {
    pub ed: PhaseProbabilities,
    pub es: PhaseProbabilities,
}

impl StudyProbabilities {
    pub fn phase(&self, phase: Phase) -> &PhaseProbabilities {
        match phase {
            Phase::Ed => &self.ed,
            Phase::Es => &self.es,
        }
    }
}

/// Post-processing and batching settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Components smaller than this fraction of their class's largest
    /// component are removed; 0 disables the step.
    pub cluster_ratio: f64,
    /// Slice pairs per forward pass.
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            cluster_ratio: 0.1,
            batch_size: 8,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cluster_ratio) {
            return Err(Error::validation(format!("cluster ratio {} outside [0, 1]", self.cluster_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// The fold models used together.
#[derive(Debug, Clone)]
pub struct Ensemble {
    models: Vec<ParameterSet<f32>>,
    preprocess: PreprocessConfig,
}

impl Ensemble {
    /// Builds an ensemble; every model must share one network configuration.
    pub fn new(models: Vec<ParameterSet<f32>>, preprocess: PreprocessConfig) -> Result<Self> {
        let first = models.first().ok_or_else(|| Error::validation("ensemble needs at least one model"))?;
        if let Some(i) = models.iter().position(|m| m.config() != first.config()) {
            return Err(Error::validation(format!("model {i} has a different network configuration than model 0")));
        }
        if preprocess.target_size % first.config().size_multiple() != 0 {
            return Err(Error::validation(format!(
                "image size {} is not divisible by {}",
                preprocess.target_size,
                first.config().size_multiple()
            )));
        }
        Ok(Self { models, preprocess })
    }

    /// Loads checkpoints; their network and preprocessing settings must agree.
    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let mut models = Vec::with_capacity(paths.len());
        let mut preprocess: Option<PreprocessConfig> = None;
        for p in paths {
            let (params, meta) = load_checkpoint(p)?;
            match preprocess {
                Some(pp) if pp != meta.preprocess => {
                    return Err(Error::validation(format!(
                        "{} was trained with different preprocessing settings",
                        p.display()
                    )))
                }
                _ => preprocess = Some(meta.preprocess),
            }
            models.push(params);
        }
        Self::new(models, preprocess.unwrap_or_default())
    }

    pub fn models(&self) -> &[ParameterSet<f32>] {
        &self.models
    }

    pub fn network(&self) -> &NetworkConfig {
        self.models[0].config()
    }

    pub fn preprocess(&self) -> &PreprocessConfig {
        &self.preprocess
    }
}

/// The selected checkpoint of every fold under `models_dir`
/// (`fold_*/best.ckpt`, ordered by fold number).
pub fn discover_checkpoints(models_dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(models_dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(models_dir.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut folds: Vec<(usize, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(k) = name.strip_prefix("fold_").and_then(|k| k.parse::<usize>().ok()) else {
            continue;
        };
        let ckpt = entry.path().join("best.ckpt");
        if !ckpt.is_file() {
            return Err(Error::NotFound(ckpt));
        }
        folds.push((k, ckpt));
    }
    if folds.is_empty() {
        return Err(Error::validation(format!("no fold_*/best.ckpt under {}", models_dir.display())));
    }
    folds.sort();
    Ok(folds.into_iter().map(|(_, p)| p).collect())
}

/// Softmax probabilities of one model for every SA slice of a phase paired
/// with the LA slice. The LA branch sees a different SA context for every
/// pairing, so its outputs are averaged over the pairings.
fn predict_phase(model: &ParameterSet<f32>, study: &PreprocessedStudy, phase: Phase, batch_size: usize) -> Result<PhaseProbabilities> {
    let p = study.phase(phase);
    let [ns, nr, nc] = p.sa.image.shape();
    if p.la.image.shape() != [ns, nr, nc] {
        return Err(Error::validation(format!(
            "{}: SA grid {:?} and LA grid {:?} differ",
            study.subject_id,
            p.sa.image.shape(),
            p.la.image.shape()
        )));
    }
    let classes = model.config().classes;
    let plane = nr * nc;
    let mut sa = vec![0.0f32; classes * ns * plane];
    let mut la = vec![0.0f32; classes * ns * plane];
    let mut start = 0;
    while start < ns {
        let end = (start + batch_size).min(ns);
        let b = end - start;
        let range = start * plane..end * plane;
        let x_sa = Tensor::from_nchw([b, 1, nr, nc], &p.sa.image.data()[range.clone()]);
        let x_la = Tensor::from_nchw([b, 1, nr, nc], &p.la.image.data()[range]);
        let out = model.forward(&x_sa, &x_la, Mode::Eval)?;
        for (logits, dst) in [(out.sa.main(), &mut sa), (out.la.main(), &mut la)] {
            let probs = logits.softmax_channels();
            for i in 0..b {
                for k in 0..classes {
                    let s = start + i;
                    dst[(k * ns + s) * plane..(k * ns + s + 1) * plane].copy_from_slice(probs.plane(i, k));
                }
            }
        }
        start = end;
    }
    let sa_map = ProbabilityMap::new(classes, [ns, nr, nc], p.sa.image.spacing(), sa)?;
    let la_all = ProbabilityMap::new(classes, [ns, nr, nc], p.la.image.spacing(), la)?;
    Ok(PhaseProbabilities {
        sa: sa_map,
        la: la_all.mean_over_slices(),
    })
}

/// Probabilities of a single model for both phases.
pub fn predict_model(model: &ParameterSet<f32>, study: &PreprocessedStudy, cfg: &InferenceConfig) -> Result<StudyProbabilities> {
    cfg.validate()?;
    Ok(StudyProbabilities {
        ed: predict_phase(model, study, Phase::Ed, cfg.batch_size)?,
        es: predict_phase(model, study, Phase::Es, cfg.batch_size)?,
    })
}

/// Ensemble probabilities: every model's maps averaged voxelwise.
pub fn predict_study(ensemble: &Ensemble, study: &PreprocessedStudy, cfg: &InferenceConfig) -> Result<StudyProbabilities> {
    let per_model = ensemble
        .models()
        .iter()
        .map(|m| predict_model(m, study, cfg))
        .collect::<Result<Vec<_>>>()?;
    let avg = |phase: Phase, view: View| {
        let maps: Vec<ProbabilityMap> = per_model.iter().map(|p| p.phase(phase).view(view).clone()).collect();
        ensemble_average(&maps)
    };
    Ok(StudyProbabilities {
        ed: PhaseProbabilities {
            sa: avg(Phase::Ed, View::Sa)?,
            la: avg(Phase::Ed, View::La)?,
        },
        es: PhaseProbabilities {
            sa: avg(Phase::Es, View::Sa)?,
            la: avg(Phase::Es, View::La)?,
        },
    })
}

/// Voxelwise arithmetic mean of equally shaped maps.
pub fn ensemble_average(maps: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = maps.first().ok_or_else(|| Error::validation("nothing to average"))?;
    if maps.iter().any(|m| m.classes != first.classes || m.shape != first.shape) {
        return Err(Error::validation("probability maps differ in shape"));
    }
    let n = maps.len() as f64;
    let data = (0..first.data.len())
        .map(|i| (maps.iter().map(|m| m.data[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Ok(ProbabilityMap { data, ..first.clone() })
}

/// Most probable class per voxel; ties go to the lowest class index.
pub fn argmax_labels(map: &ProbabilityMap) -> Result<LabelMap> {
    let n = map.voxels();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..map.classes {
                if map.data[k * n + i] > map.data[best * n + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Grid::new(map.shape, map.spacing, labels)
}

/// Connected components of `label` (26-neighbourhood, which reduces to the
/// 8-neighbourhood on a single slice). Returns per-voxel component ids
/// (`usize::MAX` off the class) and component sizes.
pub fn connected_components(labels: &LabelMap, label: u8) -> (Vec<usize>, Vec<usize>) {
    let [ns, nr, nc] = labels.shape();
    let data = labels.data();
    let mut comp = vec![usize::MAX; data.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..data.len() {
        if data[seed] != label || comp[seed] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        comp[seed] = id;
        queue.push_back(seed);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (s, r, c) = (i / (nr * nc), (i / nc) % nr, i % nc);
            for ds in -1isize..=1 {
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let (s2, r2, c2) = (s as isize + ds, r as isize + dr, c as isize + dc);
                        if s2 < 0 || r2 < 0 || c2 < 0 || s2 >= ns as isize || r2 >= nr as isize || c2 >= nc as isize {
                            continue;
                        }
                        let j = (s2 as usize * nr + r2 as usize) * nc + c2 as usize;
                        if data[j] == label && comp[j] == usize::MAX {
                            comp[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// For every foreground class, sets to background each component smaller
/// than `ratio` times that class's largest component.
pub fn cluster_threshold(labels: &LabelMap, ratio: f64) -> Result<LabelMap> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::validation(format!("cluster ratio {ratio} outside [0, 1]")));
    }
    let hist = labels.histogram();
    let mut out = labels.data().to_vec();
    for label in 1..=255u8 {
        if hist[label as usize] == 0 {
            continue;
        }
        let (comp, sizes) = connected_components(labels, label);
        let largest = *sizes.iter().max().unwrap_or(&0);
        let min = ratio * largest as f64;
        for (v, &c) in out.iter_mut().zip(&comp) {
            if c != usize::MAX && (sizes[c] as f64) < min {
                *v = 0;
            }
        }
    }
    labels.with_data(out)
}

/// Final internal-label maps of both views and phases on the network grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySegmentation {
    pub ed: [LabelMap; 2],
    pub es: [LabelMap; 2],
}

impl StudySegmentation {
    pub fn get(&self, view: View, phase: Phase) -> &LabelMap {
        let pair = match phase {
            Phase::Ed => &self.ed,
            Phase::Es => &self.es,
        };
        match view {
            View::Sa => &pair[0],
            View::La => &pair[1],
        }
    }
}

/// Argmax and cluster thresholding of ensemble probabilities.
pub fn segment(probs: &StudyProbabilities, cfg: &InferenceConfig) -> Result<StudySegmentation> {
    cfg.validate()?;
    let seg = |m: &ProbabilityMap| -> Result<LabelMap> {
        let labels = argmax_labels(m)?;
        if cfg.cluster_ratio > 0.0 {
            cluster_threshold(&labels, cfg.cluster_ratio)
        } else {
            Ok(labels)
        }
    };
    Ok(StudySegmentation {
        ed: [seg(&probs.ed.sa)?, seg(&probs.ed.la)?],
        es: [seg(&probs.es.sa)?, seg(&probs.es.la)?],
    })
}

/// Runs the ensemble on one raw study and writes
/// `{subject}_{view}_{phase}_pred.nii.gz` on the acquisition grid of each
/// input image. Returns the written paths.
pub fn infer_entry(ensemble: &Ensemble, entry: &StudyEntry, cfg: &InferenceConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let study = assemble_study(entry)?;
    let pre = preprocess_study(&study, ensemble.preprocess())?;
    let seg = segment(&predict_study(ensemble, &pre, cfg)?, cfg)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(4);
    for phase in Phase::ALL {
        for view in View::ALL {
            let geometry = &pre.phase(phase).view(view).geometry;
            let original = study.phase(phase).image(view);
            let back = invert_geometry(seg.get(view, phase), geometry)?;
            if back.shape() != original.shape() {
                return Err(Error::Numerical(format!(
                    "inverted shape {:?} differs from acquisition shape {:?}",
                    back.shape(),
                    original.shape()
                )));
            }
            let pred = original.with_data(back.into_data())?;
            let path = prediction_path(out_dir, &entry.subject_id, view, phase);
            save_volume(&pred, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}
