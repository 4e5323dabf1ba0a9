//! Overlap and surface-distance metrics, phase averaging, the unified
//! challenge score and pathology-stratified reports.
//!
//! Conventions for empty masks: DSC is 1 when both masks are empty and 0
//! when exactly one is; HD-95 is 0 when both are empty and the image
//! diagonal (in mm) when exactly one is.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{load_labels, Grid, LabelMap, Phase, StudyEntry, View, RV_LABEL};
use crate::error::{Error, Result};
use crate::preprocess::remap_labels;

fn check_geometry(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::validation(format!(
            "prediction shape {:?} differs from ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let close = pred
        .spacing()
        .iter()
        .zip(gt.spacing())
        .all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0));
    if !close {
        return Err(Error::validation(format!(
            "prediction spacing {:?} differs from ground truth {:?}",
            pred.spacing(),
            gt.spacing()
        )));
    }
    Ok(())
}

/// Dice similarity coefficient of the `class_id` masks.
pub fn dsc(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<f64> {
    check_geometry(pred, gt)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == class_id, g == class_id);
        a += usize::from(p);
        b += usize::from(g);
        both += usize::from(p && g);
    }
    Ok(match (a, b) {
        (0, 0) => 1.0,
        _ => 2.0 * both as f64 / (a + b) as f64,
    })
}

/// Foreground voxels with at least one background face neighbour. Neighbours
/// outside the grid count as background, except along axes of extent one so
/// that a single slice behaves as a 2-D image.
pub fn boundary(mask: &Grid<bool>) -> Vec<[usize; 3]> {
    let shape = mask.shape();
    let mut out = Vec::new();
    for s in 0..shape[0] {
        for r in 0..shape[1] {
            for c in 0..shape[2] {
                if !mask.get(s, r, c) {
                    continue;
                }
                let p = [s, r, c];
                let on_edge = (0..3).any(|ax| {
                    shape[ax] > 1
                        && [-1isize, 1].iter().any(|&d| {
                            let q = p[ax] as isize + d;
                            if q < 0 || q >= shape[ax] as isize {
                                return true;
                            }
                            let mut n = p;
                            n[ax] = q as usize;
                            !mask.get(n[0], n[1], n[2])
                        })
                });
                if on_edge {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// Squared 1-D distance transform (lower envelope of parabolas) of `f`
/// with sample distance `h`, written to `d`.
fn edt_1d(f: &[f64], h: f64, d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let h2 = h * h;
    let mut k = 0usize;
    let first = f.iter().position(|x| x.is_finite());
    let Some(first) = first else {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + h2 * (q * q) as f64) - (f[p] + h2 * (p * p) as f64)) / (2.0 * h2 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = h2 * dq * dq + f[v[k]];
    }
}

/// Exact Euclidean distance (mm) from every voxel to the nearest of
/// `sites`, by separable squared distance transforms.
pub fn distance_to_sites(shape: [usize; 3], spacing: [f64; 3], sites: &[[usize; 3]]) -> Vec<f64> {
    let n = shape[0] * shape[1] * shape[2];
    let mut g = vec![f64::INFINITY; n];
    let idx = |s: usize, r: usize, c: usize| (s * shape[1] + r) * shape[2] + c;
    for &[s, r, c] in sites {
        g[idx(s, r, c)] = 0.0;
    }
    let longest = *shape.iter().max().unwrap_or(&1);
    let (mut f, mut d) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    for ax in 0..3 {
        let len = shape[ax];
        if len < 2 {
            continue;
        }
        let others: Vec<usize> = (0..3).filter(|&a| a != ax).collect();
        for i in 0..shape[others[0]] {
            for j in 0..shape[others[1]] {
                let at = |t: usize| {
                    let mut p = [0usize; 3];
                    p[ax] = t;
                    p[others[0]] = i;
                    p[others[1]] = j;
                    idx(p[0], p[1], p[2])
                };
                for t in 0..len {
                    f[t] = g[at(t)];
                }
                edt_1d(&f[..len], spacing[ax], &mut d[..len], &mut v, &mut z);
                for t in 0..len {
                    g[at(t)] = d[t];
                }
            }
        }
    }
    g.iter_mut().for_each(|x| *x = x.sqrt());
    g
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::validation("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::validation(format!("percentile {q} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

fn image_diagonal(shape: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3).map(|a| (shape[a] as f64 * spacing[a]).powi(2)).sum::<f64>().sqrt()
}

/// 95th-percentile symmetric Hausdorff distance (mm) between the boundaries
/// of the `class_id` masks.
pub fn hd95(pred: &LabelMap, gt: &LabelMap, class_id: u8, spacing: [f64; 3]) -> Result<f64> {
    check_geometry(pred, gt)?;
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::validation(format!("invalid spacing {spacing:?}")));
    }
    let a = boundary(&pred.map(|v| v == class_id));
    let b = boundary(&gt.map(|v| v == class_id));
    let shape = pred.shape();
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(image_diagonal(shape, spacing)),
        _ => {}
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let dist = distance_to_sites(shape, spacing, to);
        let d: Vec<f64> = from
            .iter()
            .map(|&[s, r, c]| dist[(s * shape[1] + r) * shape[2] + c])
            .collect();
        percentile(&d, 95.0)
    };
    Ok(directed(&a, &b)?.max(directed(&b, &a)?))
}

/// Mean of the end-diastolic and end-systolic values.
pub fn phase_average(ed_value: f64, es_value: f64) -> f64 {
    (ed_value + es_value) / 2.0
}

/// Reversed min-max normalization: the smallest distance maps to 1, the
/// largest to 0; a constant list maps to all ones.
pub fn normalize_hd(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::validation("no distances to normalize"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("distances must be finite"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![1.0; values.len()]);
    }
    Ok(values.iter().map(|v| 1.0 - (v - lo) / (hi - lo)).collect())
}

/// Inputs of the unified score, each in `[0, 1]` (distances normalized,
/// higher is better).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreInput {
    pub dsc_sa: f64,
    pub dsc_la: f64,
    pub hd_sa: f64,
    pub hd_la: f64,
}

/// Weighted view score: SA counts three times as much as LA.
pub fn challenge_score(s: &ScoreInput) -> Result<f64> {
    for (name, v) in [("dsc_sa", s.dsc_sa), ("dsc_la", s.dsc_la), ("hd_sa", s.hd_sa), ("hd_la", s.hd_la)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::validation(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok((0.75 * (s.dsc_sa + s.hd_sa) + 0.25 * (s.dsc_la + s.hd_la)) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub dsc: f64,
    pub hd95: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub ed: PhaseMetrics,
    pub es: PhaseMetrics,
}

impl ViewMetrics {
    pub fn phase(&self, phase: Phase) -> PhaseMetrics {
        match phase {
            Phase::Ed => self.ed,
            Phase::Es => self.es,
        }
    }

    pub fn dsc(&self) -> f64 {
        phase_average(self.ed.dsc, self.es.dsc)
    }

    pub fn hd95(&self) -> f64 {
        phase_average(self.ed.hd95, self.es.hd95)
    }
}

/// All metrics of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub subject_id: String,
    pub pathology: String,
    pub sa: ViewMetrics,
    pub la: ViewMetrics,
}

impl MetricsRecord {
    pub fn view(&self, view: View) -> &ViewMetrics {
        match view {
            View::Sa => &self.sa,
            View::La => &self.la,
        }
    }
}

/// DSC and HD-95 of one view and phase. SA volumes are scored in 3-D with
/// the slice gap included in the spacing; LA images are single slices.
pub fn phase_metrics(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<PhaseMetrics> {
    Ok(PhaseMetrics {
        dsc: dsc(pred, gt, class_id)?,
        hd95: hd95(pred, gt, class_id, gt.spacing())?,
    })
}

/// Path of a prediction written by the inference stage.
pub fn prediction_path(dir: &Path, subject: &str, view: View, phase: Phase) -> PathBuf {
    dir.join(format!("{subject}_{}_{}_pred.nii.gz", view.as_str(), phase.as_str()))
}

/// Scores the predictions in `pred_dir` (internal labels) against the
/// manifest ground truth (challenge labels) on class `class_id`.
pub fn evaluate_study(pred_dir: &Path, entry: &StudyEntry, class_id: u8) -> Result<MetricsRecord> {
    let labels = entry
        .labels
        .as_ref()
        .ok_or_else(|| Error::validation(format!("subject {} has no ground truth", entry.subject_id)))?;
    let score = |view: View, phase: Phase| -> Result<PhaseMetrics> {
        let pred = load_labels(prediction_path(pred_dir, &entry.subject_id, view, phase))?;
        let gt = remap_labels(&load_labels(labels.get(view, phase))?)?;
        phase_metrics(&pred, &gt, class_id)
    };
    let view = |v: View| -> Result<ViewMetrics> {
        Ok(ViewMetrics {
            ed: score(v, Phase::Ed)?,
            es: score(v, Phase::Es)?,
        })
    };
    Ok(MetricsRecord {
        subject_id: entry.subject_id.clone(),
        pathology: entry.pathology.clone(),
        sa: view(View::Sa)?,
        la: view(View::La)?,
    })
}

/// Scores every manifest subject on the RV class.
pub fn evaluate_predictions(pred_dir: &Path, entries: &[StudyEntry]) -> Result<Vec<MetricsRecord>> {
    entries.iter().map(|e| evaluate_study(pred_dir, e, RV_LABEL)).collect()
}

/// Per-subject unified scores, with distances normalized across the given
/// records.
pub fn record_scores(records: &[MetricsRecord]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let hd_sa = normalize_hd(&records.iter().map(|r| r.sa.hd95()).collect::<Vec<_>>())?;
    let hd_la = normalize_hd(&records.iter().map(|r| r.la.hd95()).collect::<Vec<_>>())?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            challenge_score(&ScoreInput {
                dsc_sa: r.sa.dsc(),
                dsc_la: r.la.dsc(),
                hd_sa: hd_sa[i],
                hd_la: hd_la[i],
            })
        })
        .collect()
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// One row of the pathology table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologyRow {
    pub pathology: String,
    pub subjects: usize,
    pub dsc_sa: MeanStd,
    pub dsc_la: MeanStd,
    pub hd_sa: MeanStd,
    pub hd_la: MeanStd,
}

/// Groups records by pathology (in order of first appearance) and
/// summarizes the phase-averaged metrics of each group.
pub fn pathology_report(records: &[MetricsRecord]) -> Vec<PathologyRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&MetricsRecord>> = HashMap::new();
    for r in records {
        let g = groups.entry(&r.pathology).or_default();
        if g.is_empty() {
            order.push(&r.pathology);
        }
        g.push(r);
    }
    order
        .into_iter()
        .map(|p| {
            let g = &groups[p];
            let stat = |f: &dyn Fn(&MetricsRecord) -> f64| MeanStd::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            PathologyRow {
                pathology: p.to_string(),
                subjects: g.len(),
                dsc_sa: stat(&|r| r.sa.dsc()),
                dsc_la: stat(&|r| r.la.dsc()),
                hd_sa: stat(&|r| r.sa.hd95()),
                hd_la: stat(&|r| r.la.hd95()),
            }
        })
        .collect()
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub const METRICS_HEADER: [&str; 17] = [
    "subject_id",
    "pathology",
    "dsc_sa_ed",
    "dsc_sa_es",
    "dsc_la_ed",
    "dsc_la_es",
    "hd_sa_ed",
    "hd_sa_es",
    "hd_la_ed",
    "hd_la_es",
    "dsc_sa",
    "dsc_la",
    "hd_sa",
    "hd_la",
    "hd_sa_norm",
    "hd_la_norm",
    "score",
];

/// One row per subject: per-phase values, phase averages, normalized
/// distances and the unified score.
pub fn write_metrics_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let path = path.as_ref();
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    let scores = record_scores(records)?;
    let (norm_sa, norm_la) = if records.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        (
            normalize_hd(&records.iter().map(|r| r.sa.hd95()).collect::<Vec<_>>())?,
            normalize_hd(&records.iter().map(|r| r.la.hd95()).collect::<Vec<_>>())?,
        )
    };
    for (i, r) in records.iter().enumerate() {
        let values = [
            r.sa.ed.dsc,
            r.sa.es.dsc,
            r.la.ed.dsc,
            r.la.es.dsc,
            r.sa.ed.hd95,
            r.sa.es.hd95,
            r.la.ed.hd95,
            r.la.es.hd95,
            r.sa.dsc(),
            r.la.dsc(),
            r.sa.hd95(),
            r.la.hd95(),
            norm_sa[i],
            norm_la[i],
            scores[i],
        ];
        let mut row = vec![r.subject_id.clone(), r.pathology.clone()];
        row.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_metrics_csv`] back into records.
pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(format!("bad metrics value in column {}", METRICS_HEADER[i])))
        };
        let pm = |d: usize, h: usize| -> Result<PhaseMetrics> { Ok(PhaseMetrics { dsc: num(d)?, hd95: num(h)? }) };
        out.push(MetricsRecord {
            subject_id: row.get(0).unwrap_or_default().to_string(),
            pathology: row.get(1).unwrap_or_default().to_string(),
            sa: ViewMetrics { ed: pm(2, 6)?, es: pm(3, 7)? },
            la: ViewMetrics { ed: pm(4, 8)?, es: pm(5, 9)? },
        });
    }
    Ok(out)
}

pub const REPORT_HEADER: [&str; 10] = [
    "pathology",
    "subjects",
    "dsc_sa_mean",
    "dsc_sa_std",
    "dsc_la_mean",
    "dsc_la_std",
    "hd_sa_mean",
    "hd_sa_std",
    "hd_la_mean",
    "hd_la_std",
];

/// Writes the pathology table.
pub fn write_report_csv(path: impl AsRef<Path>, rows: &[PathologyRow]) -> Result<()> {
    let path = path.as_ref();
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        let mut row = vec![r.pathology.clone(), r.subjects.to_string()];
        for m in [r.dsc_sa, r.dsc_la, r.hd_sa, r.hd_la] {
            row.push(m.mean.to_string());
            row.push(m.std.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
